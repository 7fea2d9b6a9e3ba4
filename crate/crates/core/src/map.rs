//! World-frame point map with exact k-nearest-neighbour search and local
//! plane fitting.
//!
//! The index is a kd-tree over a prefix of the stored points plus a small
//! brute-force tail of recent insertions; the tree is rebuilt once the tail
//! grows. Neighbours are ordered by `(squared distance, insertion index)`, so
//! query results do not depend on when rebuilds happen.

use std::cmp::Ordering;
use std::collections::HashSet;

use nalgebra::SymmetricEigen;

use crate::manifold::{Mat3, Vec3};
use crate::pointcloud::voxel_key;

const LEAF_SIZE: usize = 8;
const MIN_REBUILD_TAIL: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    pub point: Vec3,
    pub dist_sq: f64,
    /// Insertion index in the map.
    pub index: usize,
}

impl Neighbor {
    fn key_cmp(&self, other: &Neighbor) -> Ordering {
        self.dist_sq
            .total_cmp(&other.dist_sq)
            .then(self.index.cmp(&other.index))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KnnResult {
    /// Nearest first.
    pub neighbors: Vec<Neighbor>,
    /// False when the map held fewer than `k` points.
    pub complete: bool,
}

/// Bounded sorted list of the best candidates seen so far.
struct Best {
    k: usize,
    items: Vec<Neighbor>,
}

impl Best {
    fn new(k: usize) -> Self {
        Best {
            k,
            items: Vec::with_capacity(k + 1),
        }
    }

    fn worst_dist_sq(&self) -> f64 {
        if self.items.len() < self.k {
            f64::INFINITY
        } else {
            self.items[self.k - 1].dist_sq
        }
    }

    fn offer(&mut self, n: Neighbor) {
        if self.items.len() == self.k && n.key_cmp(&self.items[self.k - 1]) != Ordering::Less {
            return;
        }
        let pos = self
            .items
            .partition_point(|e| e.key_cmp(&n) == Ordering::Less);
        self.items.insert(pos, n);
        self.items.truncate(self.k);
    }
}

#[derive(Clone, Debug)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

#[derive(Clone, Debug, Default)]
struct KdTree {
    nodes: Vec<Node>,
    order: Vec<usize>,
}

impl KdTree {
    fn build(points: &[Vec3]) -> Self {
        let mut tree = KdTree {
            nodes: Vec::new(),
            order: (0..points.len()).collect(),
        };
        if !points.is_empty() {
            let n = points.len();
            tree.build_node(points, 0, n);
        }
        tree
    }

    fn build_node(&mut self, points: &[Vec3], start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let slice = &mut self.order[start..end];
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for &i in slice.iter() {
            lo = lo.inf(&points[i]);
            hi = hi.sup(&points[i]);
        }
        let axis = (hi - lo).imax();
        let mid = slice.len() / 2;
        slice.select_nth_unstable_by(mid, |&a, &b| {
            points[a][axis].total_cmp(&points[b][axis]).then(a.cmp(&b))
        });
        let value = points[slice[mid]][axis];
        self.nodes.push(Node::Leaf { start, end });
        let left = self.build_node(points, start, start + mid);
        let right = self.build_node(points, start + mid, end);
        self.nodes[id] = Node::Split {
            axis,
            value,
            left,
            right,
        };
        id
    }

    fn search(&self, points: &[Vec3], query: &Vec3, best: &mut Best) {
        if !self.nodes.is_empty() {
            self.search_node(0, points, query, best);
        }
    }

    fn search_node(&self, id: usize, points: &[Vec3], query: &Vec3, best: &mut Best) {
        match self.nodes[id] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    best.offer(Neighbor {
                        point: points[i],
                        dist_sq: (points[i] - query).norm_squared(),
                        index: i,
                    });
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
                self.search_node(near, points, query, best);
                // `<=` keeps equidistant candidates reachable for the tie order.
                if diff * diff <= best.worst_dist_sq() {
                    self.search_node(far, points, query, best);
                }
            }
        }
    }
}

/// Incremental map of world-frame points.
#[derive(Clone, Debug)]
pub struct MapIndex {
    points: Vec<Vec3>,
    tree: KdTree,
    /// Number of leading points covered by `tree`.
    indexed: usize,
    leaf: Option<f64>,
    occupied: HashSet<(i64, i64, i64)>,
}

impl MapIndex {
    /// `leaf` enables the voxel-occupancy filter: at most one stored point
    /// per voxel of that edge length.
    pub fn new(leaf: Option<f64>) -> Self {
        MapIndex {
            points: Vec::new(),
            tree: KdTree::default(),
            indexed: 0,
            leaf: leaf.filter(|l| *l > 0.0),
            occupied: HashSet::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    /// Inserts finite points that pass the occupancy filter and returns how
    /// many were stored.
    pub fn insert_scan(&mut self, points_world: &[Vec3]) -> usize {
        let before = self.points.len();
        for p in points_world {
            if !p.iter().all(|v| v.is_finite()) {
                continue;
            }
            if let Some(leaf) = self.leaf {
                if !self.occupied.insert(voxel_key(p, leaf)) {
                    continue;
                }
            }
            self.points.push(*p);
        }
        let tail = self.points.len() - self.indexed;
        if tail > MIN_REBUILD_TAIL.max(self.indexed / 8) {
            self.rebuild();
        }
        self.points.len() - before
    }

    fn rebuild(&mut self) {
        self.tree = KdTree::build(&self.points);
        self.indexed = self.points.len();
    }

    /// Exact k nearest neighbours, nearest first, ties broken by insertion
    /// order.
    pub fn knn(&self, query: &Vec3, k: usize) -> KnnResult {
        if k == 0 || self.points.is_empty() {
            return KnnResult {
                neighbors: Vec::new(),
                complete: k == 0,
            };
        }
        let mut best = Best::new(k);
        self.tree.search(&self.points[..self.indexed], query, &mut best);
        for (i, p) in self.points.iter().enumerate().skip(self.indexed) {
            best.offer(Neighbor {
                point: *p,
                dist_sq: (p - query).norm_squared(),
                index: i,
            });
        }
        let complete = best.items.len() == k;
        KnnResult {
            neighbors: best.items,
            complete,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlaneParams {
    /// Maximum distance of any fitted neighbour from the plane.
    pub plane_tol: f64,
    /// Matches whose farthest neighbour lies beyond this are rejected.
    pub match_dist_max: f64,
}

impl Default for PlaneParams {
    fn default() -> Self {
        PlaneParams {
            plane_tol: 0.1,
            match_dist_max: 1.0,
        }
    }
}

/// Plane correspondence for one scan point.
#[derive(Clone, Debug, PartialEq)]
pub struct PlaneMatch {
    /// Unit normal.
    pub normal: Vec3,
    /// Centroid of the fitted neighbours.
    pub anchor: Vec3,
    pub valid: bool,
    pub neighbor_dists: Vec<f64>,
}

/// Least-squares plane through `points` (smallest eigenvector of the
/// scatter matrix).
///
/// `neighbor_dists` are the query-to-neighbour distances used for the
/// `match_dist_max` gate; pass an empty slice to skip it. With a `viewpoint`
/// the normal points towards it, otherwise its first non-zero component is
/// positive.
pub fn fit_plane(
    points: &[Vec3],
    neighbor_dists: &[f64],
    params: &PlaneParams,
    viewpoint: Option<&Vec3>,
) -> PlaneMatch {
    let invalid = |anchor: Vec3| PlaneMatch {
        normal: Vec3::z(),
        anchor,
        valid: false,
        neighbor_dists: neighbor_dists.to_vec(),
    };
    if points.len() < 3 {
        return invalid(Vec3::zeros());
    }
    let anchor = points.iter().sum::<Vec3>() / points.len() as f64;
    let mut scatter = Mat3::zeros();
    for p in points {
        let d = p - anchor;
        scatter += d * d.transpose();
    }
    let eig = SymmetricEigen::new(scatter);
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let (lambda_mid, lambda_max) = (eig.eigenvalues[idx[1]], eig.eigenvalues[idx[2]]);
    // Rank < 2: coincident or collinear neighbours do not define a plane.
    if !(lambda_max > 0.0) || lambda_mid <= 1e-10 * lambda_max {
        return invalid(anchor);
    }
    let mut normal: Vec3 = eig.eigenvectors.column(idx[0]).into_owned().normalize();
    let flip = match viewpoint {
        Some(v) => normal.dot(&(v - anchor)) < 0.0,
        None => normal
            .iter()
            .find(|c| c.abs() > 1e-12)
            .is_some_and(|c| *c < 0.0),
    };
    if flip {
        normal = -normal;
    }
    let planar = points
        .iter()
        .all(|p| normal.dot(&(p - anchor)).abs() <= params.plane_tol);
    let close = neighbor_dists.iter().all(|d| *d <= params.match_dist_max);
    PlaneMatch {
        normal,
        anchor,
        valid: planar && close,
        neighbor_dists: neighbor_dists.to_vec(),
    }
}

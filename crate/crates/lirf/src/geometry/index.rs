//! Exact k-nearest-neighbour queries.
//!
//! Results are sorted by `(distance, index)` ascending and are identical to a
//! full brute-force sort. Low-dimensional sources use a kd-tree; above
//! [`KD_MAX_DIM`] dimensions the index scans linearly.

use std::cmp::Ordering;

use super::distance::dist_sq_unchecked;
use super::PointSet;
use crate::error::{LirfError, Result};

pub const KD_MAX_DIM: usize = 16;
const LEAF_SIZE: usize = 8;
// Pruning margin. Computed distances are rounded, so a subtree is only skipped
// when its bound is clearly beyond the current worst candidate.
const PRUNE_SLACK: f64 = 1.0 + 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub distance: f64,
}

fn cmp_neighbor(a: &Neighbor, b: &Neighbor) -> Ordering {
    a.distance
        .total_cmp(&b.distance)
        .then(a.index.cmp(&b.index))
}

#[derive(Debug)]
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

#[derive(Debug)]
struct KdTree {
    nodes: Vec<Node>,
    order: Vec<usize>,
}

impl KdTree {
    fn build(points: &PointSet) -> Self {
        let mut tree = KdTree {
            nodes: Vec::new(),
            order: (0..points.len()).collect(),
        };
        let n = points.len();
        tree.build_node(points, 0, n);
        tree
    }

    fn build_node(&mut self, points: &PointSet, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let dim = points.dim();
        let slice = &self.order[start..end];
        let axis = (0..dim)
            .map(|a| {
                let (lo, hi) =
                    slice
                        .iter()
                        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
                            let v = points.point(i)[a];
                            (lo.min(v), hi.max(v))
                        });
                (a, hi - lo)
            })
            .max_by(|x, y| x.1.total_cmp(&y.1).then(y.0.cmp(&x.0)))
            .map(|(a, _)| a)
            .unwrap_or(0);
        let mid = (end - start) / 2;
        self.order[start..end].select_nth_unstable_by(mid, |&a, &b| {
            points.point(a)[axis]
                .total_cmp(&points.point(b)[axis])
                .then(a.cmp(&b))
        });
        let value = points.point(self.order[start + mid])[axis];
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
}

/// Bounded list of the best neighbours seen so far, kept sorted.
struct Best {
    k: usize,
    items: Vec<Neighbor>,
}

impl Best {
    fn worst(&self) -> Option<f64> {
        (self.items.len() == self.k).then(|| self.items[self.k - 1].distance)
    }

    fn offer(&mut self, cand: Neighbor) {
        if self.items.len() == self.k {
            if cmp_neighbor(&cand, &self.items[self.k - 1]) != Ordering::Less {
                return;
            }
            self.items.pop();
        }
        let pos = self
            .items
            .partition_point(|n| cmp_neighbor(n, &cand) == Ordering::Less);
        self.items.insert(pos, cand);
    }
}

/// Exact k-NN index over a borrowed, frozen [`PointSet`].
#[derive(Debug)]
pub struct NeighborIndex<'a> {
    source: &'a PointSet,
    tree: Option<KdTree>,
}

impl<'a> NeighborIndex<'a> {
    pub fn new(source: &'a PointSet) -> Self {
        let tree =
            (source.dim() <= KD_MAX_DIM && source.len() > LEAF_SIZE).then(|| KdTree::build(source));
        Self { source, tree }
    }

    /// Forces a linear scan regardless of dimension.
    pub fn brute_force(source: &'a PointSet) -> Self {
        Self { source, tree: None }
    }

    pub fn source(&self) -> &'a PointSet {
        self.source
    }

    /// The `k` nearest eligible source points, sorted by `(distance, index)`.
    ///
    /// With `label_filter` set only points carrying that label are eligible.
    /// A query that coincides with a source point is not excluded.
    pub fn knn(&self, query: &[f64], k: usize, label_filter: Option<i64>) -> Result<Vec<Neighbor>> {
        if k == 0 {
            return Err(LirfError::InvalidConfig("k must be at least 1".into()));
        }
        if query.len() != self.source.dim() {
            return Err(LirfError::DimensionMismatch {
                expected: self.source.dim(),
                got: query.len(),
            });
        }
        let labels = match label_filter {
            Some(_) => Some(self.source.labels().ok_or_else(|| {
                LirfError::InvalidConfig("label filter on an unlabelled point set".into())
            })?),
            None => None,
        };
        let eligible = |i: usize| match (labels, label_filter) {
            (Some(l), Some(f)) => l[i] == f,
            _ => true,
        };
        let mut best = Best {
            k,
            items: Vec::with_capacity(k + 1),
        };
        match &self.tree {
            Some(tree) => self.search(tree, 0, query, &eligible, &mut best),
            None => {
                for i in (0..self.source.len()).filter(|&i| eligible(i)) {
                    let d = dist_sq_unchecked(query, self.source.point(i)).sqrt();
                    best.offer(Neighbor {
                        index: i,
                        distance: d,
                    });
                }
            }
        }
        if best.items.is_empty() {
            return Err(LirfError::NoEligibleNeighbors);
        }
        Ok(best.items)
    }

    pub fn nearest(&self, query: &[f64]) -> Result<Neighbor> {
        Ok(self.knn(query, 1, None)?[0])
    }

    fn search(
        &self,
        tree: &KdTree,
        node: usize,
        q: &[f64],
        eligible: &dyn Fn(usize) -> bool,
        best: &mut Best,
    ) {
        match tree.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &tree.order[start..end] {
                    if eligible(i) {
                        let d = dist_sq_unchecked(q, self.source.point(i)).sqrt();
                        best.offer(Neighbor {
                            index: i,
                            distance: d,
                        });
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 {
                    (left, right)
                } else {
                    (right, left)
                };
                self.search(tree, near, q, eligible, best);
                let visit_far = match best.worst() {
                    None => true,
                    Some(w) => diff * diff <= w * w * PRUNE_SLACK,
                };
                if visit_far {
                    self.search(tree, far, q, eligible, best);
                }
            }
        }
    }
}

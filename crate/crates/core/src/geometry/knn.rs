use std::cmp::Ordering;
use std::collections::BinaryHeap;

use super::Point3;
use crate::{Error, Result};

/// Below this many reference points the exhaustive scan is used.
const EXHAUSTIVE_LIMIT: usize = 512;
const LEAF_SIZE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    /// Euclidean distance in meters.
    pub distance: f64,
}

/// Candidate ordered by (squared distance, index); the max-heap top is the worst kept.
#[derive(Clone, Copy, PartialEq)]
struct Candidate {
    d2: f64,
    index: usize,
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.d2
            .total_cmp(&other.d2)
            .then(self.index.cmp(&other.index))
    }
}

struct Best {
    k: usize,
    heap: BinaryHeap<Candidate>,
}

impl Best {
    fn new(k: usize) -> Self {
        Self {
            k,
            heap: BinaryHeap::with_capacity(k + 1),
        }
    }

    fn offer(&mut self, c: Candidate) {
        if self.heap.len() < self.k {
            self.heap.push(c);
        } else if let Some(worst) = self.heap.peek() {
            if c < *worst {
                self.heap.pop();
                self.heap.push(c);
            }
        }
    }

    /// Squared radius a subtree must beat to matter; ties must still be visited.
    fn bound(&self) -> f64 {
        if self.heap.len() < self.k {
            f64::INFINITY
        } else {
            self.heap.peek().map_or(f64::INFINITY, |c| c.d2)
        }
    }

    fn finish(self) -> Vec<Neighbor> {
        self.heap
            .into_sorted_vec()
            .into_iter()
            .map(|c| Neighbor {
                index: c.index,
                distance: c.d2.sqrt(),
            })
            .collect()
    }
}

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

/// Static kd-tree over a reference set. Queries return exactly what the
/// exhaustive scan returns, including the lower-index tie rule.
pub struct KdTree<'a> {
    points: &'a [Point3],
    order: Vec<usize>,
    nodes: Vec<Node>,
}

fn coord(p: &Point3, axis: usize) -> f64 {
    match axis {
        0 => p.x,
        1 => p.y,
        _ => p.z,
    }
}

impl<'a> KdTree<'a> {
    pub fn build(points: &'a [Point3]) -> Self {
        let mut tree = KdTree {
            points,
            order: (0..points.len()).collect(),
            nodes: Vec::new(),
        };
        if !points.is_empty() {
            tree.build_node(0, points.len());
        }
        tree
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let slice = &self.order[start..end];
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in slice {
            for a in 0..3 {
                let v = coord(&self.points[i], a);
                lo[a] = lo[a].min(v);
                hi[a] = hi[a].max(v);
            }
        }
        let axis = (0..3)
            .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
            .unwrap_or(0);
        if hi[axis] - lo[axis] == 0.0 {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mid = start + (end - start) / 2;
        let points = self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            coord(&points[a], axis).total_cmp(&coord(&points[b], axis))
        });
        let value = coord(&self.points[self.order[mid]], axis);
        self.nodes.push(Node::Leaf { start, end });
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

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn nearest(&self, query: Point3, k: usize) -> Vec<Neighbor> {
        let mut best = Best::new(k.min(self.points.len()));
        if best.k > 0 {
            self.search(0, query, &mut best);
        }
        best.finish()
    }

    fn search(&self, node: usize, q: Point3, best: &mut Best) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    best.offer(Candidate {
                        d2: q.distance_squared(self.points[i]),
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
                let diff = coord(&q, axis) - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, best);
                if diff * diff <= best.bound() {
                    self.search(far, q, best);
                }
            }
        }
    }
}

/// Brute-force reference implementation with the same ordering contract.
pub fn knn_search_exhaustive(
    query: &[Point3],
    reference: &[Point3],
    k: usize,
) -> Result<Vec<Vec<Neighbor>>> {
    if reference.is_empty() {
        return Err(Error::EmptyReference);
    }
    Ok(query
        .iter()
        .map(|q| {
            let mut best = Best::new(k.min(reference.len()));
            for (i, r) in reference.iter().enumerate() {
                best.offer(Candidate {
                    d2: q.distance_squared(*r),
                    index: i,
                });
            }
            best.finish()
        })
        .collect())
}

/// k nearest reference points per query, ascending by distance, ties to the
/// lower reference index. `k` larger than the reference set is clamped.
pub fn knn_search(query: &[Point3], reference: &[Point3], k: usize) -> Result<Vec<Vec<Neighbor>>> {
    if reference.is_empty() {
        return Err(Error::EmptyReference);
    }
    if reference.len() < EXHAUSTIVE_LIMIT {
        return knn_search_exhaustive(query, reference, k);
    }
    let tree = KdTree::build(reference);
    Ok(query.iter().map(|q| tree.nearest(*q, k)).collect())
}

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use super::{dist2, Point3};

const LINEAR_SCAN_BELOW: usize = 256;
const LEAF_SIZE: usize = 12;

/// A query result: squared distance and index into the indexed cloud.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    pub dist2: f64,
    pub index: usize,
}

impl Eq for Neighbor {}

impl Ord for Neighbor {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist2
            .total_cmp(&other.dist2)
            .then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Neighbor {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug)]
enum KdNode {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

/// Exact nearest-neighbor index over a fixed set of points.
///
/// Results are ordered by `(squared distance, index)`, so ties resolve to
/// the lowest index exactly as a linear scan would. Small sets are scanned
/// linearly; larger ones use a kd-tree.
#[derive(Debug)]
pub struct NeighborIndex {
    points: Vec<Point3>,
    order: Vec<usize>,
    nodes: Vec<KdNode>,
}

impl NeighborIndex {
    pub fn new(points: &[Point3]) -> Self {
        let mut index = Self {
            points: points.to_vec(),
            order: (0..points.len()).collect(),
            nodes: Vec::new(),
        };
        if points.len() >= LINEAR_SCAN_BELOW {
            let mut order = std::mem::take(&mut index.order);
            index.build(&mut order, 0);
            index.order = order;
        }
        index
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    fn build(&mut self, order: &mut [usize], offset: usize) -> usize {
        let id = self.nodes.len();
        if order.len() <= LEAF_SIZE {
            self.nodes.push(KdNode::Leaf {
                start: offset,
                end: offset + order.len(),
            });
            return id;
        }
        let axis = widest_axis(&self.points, order);
        let mid = order.len() / 2;
        let pts = &self.points;
        order.select_nth_unstable_by(mid, |&a, &b| pts[a][axis].total_cmp(&pts[b][axis]));
        let value = self.points[order[mid]][axis];
        self.nodes.push(KdNode::Leaf { start: 0, end: 0 });
        let (lo, hi) = order.split_at_mut(mid);
        let left = self.build(lo, offset);
        let right = self.build(hi, offset + mid);
        self.nodes[id] = KdNode::Split {
            axis,
            value,
            left,
            right,
        };
        id
    }

    /// Nearest point to `q`, or `None` for an empty index.
    pub fn nearest(&self, q: &Point3) -> Option<Neighbor> {
        self.knn(q, 1).into_iter().next()
    }

    /// The `k` nearest points to `q`, closest first.
    pub fn knn(&self, q: &Point3, k: usize) -> Vec<Neighbor> {
        if k == 0 || self.points.is_empty() {
            return Vec::new();
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        if self.nodes.is_empty() {
            for (index, p) in self.points.iter().enumerate() {
                offer(&mut heap, k, Neighbor { dist2: dist2(q, p), index });
            }
        } else {
            self.search(0, q, k, &mut heap);
        }
        heap.into_sorted_vec()
    }

    fn search(&self, node: usize, q: &Point3, k: usize, heap: &mut BinaryHeap<Neighbor>) {
        match self.nodes[node] {
            KdNode::Leaf { start, end } => {
                for &index in &self.order[start..end] {
                    let d = dist2(q, &self.points[index]);
                    offer(heap, k, Neighbor { dist2: d, index });
                }
            }
            KdNode::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, k, heap);
                // `<=` keeps equal-distance candidates with lower indices reachable.
                let worst = heap.peek().map_or(f64::INFINITY, |n| n.dist2);
                if heap.len() < k || diff * diff <= worst {
                    self.search(far, q, k, heap);
                }
            }
        }
    }
}

fn offer(heap: &mut BinaryHeap<Neighbor>, k: usize, cand: Neighbor) {
    if heap.len() < k {
        heap.push(cand);
    } else if let Some(worst) = heap.peek() {
        if cand < *worst {
            heap.pop();
            heap.push(cand);
        }
    }
}

fn widest_axis(points: &[Point3], order: &[usize]) -> usize {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for &i in order {
        for a in 0..3 {
            lo[a] = lo[a].min(points[i][a]);
            hi[a] = hi[a].max(points[i][a]);
        }
    }
    (0..3)
        .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])).then(b.cmp(&a)))
        .unwrap_or(0)
}

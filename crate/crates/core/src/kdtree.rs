//! Balanced k-d tree over fixed-dimension points with exact nearest and k-nearest queries.
//! Equal distances resolve to the lowest payload index.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
struct Node {
    point: usize,
    axis: usize,
    left: Option<usize>,
    right: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct KdTree<const D: usize> {
    points: Vec<[f64; D]>,
    payload: Vec<usize>,
    nodes: Vec<Node>,
    root: Option<usize>,
}

pub type EeKdTree = KdTree<3>;

#[derive(Clone, Copy, PartialEq)]
struct Candidate {
    d2: f64,
    index: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.d2
            .total_cmp(&other.d2)
            .then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn dist2<const D: usize>(a: &[f64; D], b: &[f64; D]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl<const D: usize> KdTree<D> {
    /// Payload of point `i` is `i`.
    pub fn build(points: Vec<[f64; D]>) -> Self {
        let payload = (0..points.len()).collect();
        Self::build_with_payload(points, payload)
    }

    pub fn build_with_payload(points: Vec<[f64; D]>, payload: Vec<usize>) -> Self {
        assert_eq!(points.len(), payload.len());
        let mut tree = KdTree {
            points,
            payload,
            nodes: Vec::new(),
            root: None,
        };
        let mut order: Vec<usize> = (0..tree.points.len()).collect();
        tree.nodes.reserve(order.len());
        tree.root = tree.build_rec(&mut order, 0);
        tree
    }

    fn build_rec(&mut self, ids: &mut [usize], depth: usize) -> Option<usize> {
        if ids.is_empty() {
            return None;
        }
        let axis = depth % D;
        let mid = ids.len() / 2;
        let pts = &self.points;
        ids.select_nth_unstable_by(mid, |&a, &b| {
            pts[a][axis].total_cmp(&pts[b][axis]).then(a.cmp(&b))
        });
        let node = self.nodes.len();
        self.nodes.push(Node {
            point: ids[mid],
            axis,
            left: None,
            right: None,
        });
        let (lo, rest) = ids.split_at_mut(mid);
        let left = self.build_rec(lo, depth + 1);
        let right = self.build_rec(&mut rest[1..], depth + 1);
        self.nodes[node].left = left;
        self.nodes[node].right = right;
        Some(node)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64; D] {
        &self.points[i]
    }

    /// `(payload index, distance)` of the nearest point.
    pub fn nearest(&self, q: &[f64; D]) -> Result<(usize, f64)> {
        let r = self.k_nearest(q, 1)?;
        Ok(r[0])
    }

    /// Up to `k` nearest points, ascending by `(distance, payload index)`.
    pub fn k_nearest(&self, q: &[f64; D], k: usize) -> Result<Vec<(usize, f64)>> {
        if self.points.is_empty() {
            return Err(Error::EmptyIndex);
        }
        let k = k.min(self.points.len());
        let mut heap = BinaryHeap::with_capacity(k + 1);
        if k > 0 {
            self.search(self.root, q, k, &mut heap);
        }
        let mut out: Vec<Candidate> = heap.into_vec();
        out.sort();
        Ok(out.into_iter().map(|c| (c.index, c.d2.sqrt())).collect())
    }

    fn search(
        &self,
        node: Option<usize>,
        q: &[f64; D],
        k: usize,
        heap: &mut BinaryHeap<Candidate>,
    ) {
        let Some(n) = node else { return };
        let node = &self.nodes[n];
        let p = &self.points[node.point];
        let cand = Candidate {
            d2: dist2(p, q),
            index: self.payload[node.point],
        };
        if heap.len() < k {
            heap.push(cand);
        } else if cand < *heap.peek().expect("k > 0") {
            heap.pop();
            heap.push(cand);
        }
        let diff = q[node.axis] - p[node.axis];
        let (near, far) = if diff < 0.0 {
            (node.left, node.right)
        } else {
            (node.right, node.left)
        };
        self.search(near, q, k, heap);
        // ties on the splitting plane may still hold a lower index
        if heap.len() < k || diff * diff <= heap.peek().expect("k > 0").d2 {
            self.search(far, q, k, heap);
        }
    }
}

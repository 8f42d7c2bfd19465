//! Exact k-nearest-neighbour search under squared Euclidean distance.
//!
//! Results are ordered by `(distance², index)`, so ties always resolve to
//! the lower point index and the tree agrees with [`brute_force_knn`]
//! element for element.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use ndarray::{Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};
use crate::Scalar;

const LEAF_SIZE: usize = 16;

#[derive(Debug, Clone)]
enum Node<T> {
    Leaf { start: usize, end: usize },
    Split { dim: usize, value: T, left: usize, right: usize },
}

#[derive(Debug, Clone)]
pub struct KdTree<T> {
    points: Array2<T>,
    order: Vec<usize>,
    nodes: Vec<Node<T>>,
}

/// One search result.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor<T> {
    pub index: usize,
    pub dist_sq: T,
}

#[derive(Clone, Copy)]
struct Entry<T>(T, usize);

impl<T: Scalar> PartialEq for Entry<T> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl<T: Scalar> Eq for Entry<T> {}
impl<T: Scalar> PartialOrd for Entry<T> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<T: Scalar> Ord for Entry<T> {
    fn cmp(&self, other: &Self) -> Ordering {
        // inputs are checked finite
        self.0.partial_cmp(&other.0).unwrap_or(Ordering::Equal).then(self.1.cmp(&other.1))
    }
}

fn dist_sq<T: Scalar>(a: ArrayView1<T>, b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    acc
}

fn check_query<T: Scalar>(dim: usize, query: &[T]) -> Result<()> {
    if query.len() != dim {
        return Err(Error::DimensionMismatch(format!("query width {}, points have {dim}", query.len())));
    }
    if query.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("knn query".into()));
    }
    Ok(())
}

/// Reference search by full scan.
pub fn brute_force_knn<T: Scalar>(points: ArrayView2<T>, query: &[T], k: usize) -> Result<Vec<Neighbor<T>>> {
    check_query(points.ncols(), query)?;
    let mut all: Vec<Entry<T>> =
        points.rows().into_iter().enumerate().map(|(i, p)| Entry(dist_sq(p, query), i)).collect();
    all.sort();
    Ok(all.into_iter().take(k).map(|Entry(d, i)| Neighbor { index: i, dist_sq: d }).collect())
}

impl<T: Scalar> KdTree<T> {
    pub fn build(points: Array2<T>) -> Result<Self> {
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("kd-tree points".into()));
        }
        let mut tree = KdTree { order: (0..points.nrows()).collect(), points, nodes: Vec::new() };
        if !tree.is_empty() {
            tree.build_node(0, tree.len());
        }
        Ok(tree)
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf { start, end });
        if end - start <= LEAF_SIZE {
            return id;
        }
        let (mut best_dim, mut best_spread) = (0, T::zero());
        for dim in 0..self.points.ncols() {
            let (mut lo, mut hi) = (T::infinity(), T::neg_infinity());
            for &i in &self.order[start..end] {
                let v = self.points[[i, dim]];
                lo = lo.min(v);
                hi = hi.max(v);
            }
            if hi - lo > best_spread {
                best_spread = hi - lo;
                best_dim = dim;
            }
        }
        if best_spread == T::zero() {
            // all points coincide
            return id;
        }
        let mid = start + (end - start) / 2;
        let points = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            points[[a, best_dim]].partial_cmp(&points[[b, best_dim]]).unwrap_or(Ordering::Equal)
        });
        let value = self.points[[self.order[mid], best_dim]];
        let left = self.build_node(start, mid);
        let right = self.build_node(mid, end);
        self.nodes[id] = Node::Split { dim: best_dim, value, left, right };
        id
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn points(&self) -> &Array2<T> {
        &self.points
    }

    /// The `min(k, len)` nearest points, closest first.
    pub fn knn(&self, query: &[T], k: usize) -> Result<Vec<Neighbor<T>>> {
        check_query(self.dim(), query)?;
        if k == 0 || self.is_empty() {
            return Ok(Vec::new());
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.search(0, query, k, &mut heap);
        let mut out: Vec<_> = heap.into_vec();
        out.sort();
        Ok(out.into_iter().map(|Entry(d, i)| Neighbor { index: i, dist_sq: d }).collect())
    }

    fn search(&self, node: usize, query: &[T], k: usize, heap: &mut BinaryHeap<Entry<T>>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let e = Entry(dist_sq(self.points.row(i), query), i);
                    if heap.len() < k {
                        heap.push(e);
                    } else if e < *heap.peek().expect("heap is full") {
                        heap.pop();
                        heap.push(e);
                    }
                }
            }
            Node::Split { dim, value, left, right } => {
                let diff = query[dim] - value;
                let (near, far) = if diff < T::zero() { (left, right) } else { (right, left) };
                self.search(near, query, k, heap);
                // equality still visits: a tie may hold a lower index
                if heap.len() < k || diff * diff <= heap.peek().expect("heap is full").0 {
                    self.search(far, query, k, heap);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn matches_brute_force_with_duplicates() {
        let mut r = crate::rng::stream(4, "t");
        for trial in 0..30 {
            let n = r.gen_range(1..400);
            let dim = r.gen_range(1..5);
            // coarse grid forces many exact ties
            let pts = Array2::from_shape_fn((n, dim), |_| r.gen_range(0..5) as f64 * 0.5);
            let tree = KdTree::build(pts.clone()).unwrap();
            for _ in 0..10 {
                let q: Vec<f64> = (0..dim).map(|_| r.gen_range(0..5) as f64 * 0.5).collect();
                let k = r.gen_range(1..60);
                assert_eq!(tree.knn(&q, k).unwrap(), brute_force_knn(pts.view(), &q, k).unwrap(), "trial {trial}");
            }
        }
    }

    #[test]
    fn edge_cases() {
        let pts = Array2::from_shape_vec((3, 2), vec![0.0f32, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        let tree = KdTree::build(pts).unwrap();
        assert!(tree.knn(&[0.0, 0.0], 0).unwrap().is_empty());
        let all = tree.knn(&[0.9, 0.0], 10).unwrap();
        assert_eq!(all.iter().map(|n| n.index).collect::<Vec<_>>(), vec![1, 0, 2]);
        // equidistant from 1 and 2: lower index wins
        assert_eq!(tree.knn(&[0.5, 0.5], 1).unwrap()[0].index, 0);
        assert_eq!(tree.knn(&[1.0, 1.0], 1).unwrap()[0].index, 1);
        assert!(tree.knn(&[0.0], 1).is_err());
        assert!(tree.knn(&[f32::NAN, 0.0], 1).is_err());
        assert!(KdTree::build(Array2::from_elem((2, 1), f32::INFINITY)).is_err());
        let empty = KdTree::<f32>::build(Array2::zeros((0, 2))).unwrap();
        assert!(empty.knn(&[0.0, 0.0], 3).unwrap().is_empty());
    }
}

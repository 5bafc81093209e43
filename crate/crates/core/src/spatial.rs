//! Exact k-d tree for radius and k-nearest-neighbour queries.
//!
//! Results are ordered by `(distance, index)` so that ties resolve the same
//! way a brute-force scan would.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Debug)]
struct Node {
    point: usize,
    axis: usize,
    left: Option<usize>,
    right: Option<usize>,
}

#[derive(Debug)]
pub struct KdTree<'a> {
    points: &'a [Vec<f64>],
    nodes: Vec<Node>,
    root: Option<usize>,
}

#[derive(PartialEq)]
struct Candidate(f64, usize);

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
    }
}

impl<'a> KdTree<'a> {
    pub fn new(points: &'a [Vec<f64>]) -> Self {
        let mut idx: Vec<usize> = (0..points.len()).collect();
        let mut tree = KdTree {
            points,
            nodes: Vec::with_capacity(points.len()),
            root: None,
        };
        tree.root = tree.build(&mut idx);
        tree
    }

    fn build(&mut self, idx: &mut [usize]) -> Option<usize> {
        if idx.is_empty() {
            return None;
        }
        let dim = self.points[idx[0]].len();
        let axis = (0..dim)
            .map(|d| {
                let (lo, hi) = idx.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
                    let v = self.points[i][d];
                    (lo.min(v), hi.max(v))
                });
                (d, hi - lo)
            })
            .fold((0, f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best })
            .0;
        let mid = idx.len() / 2;
        let points = self.points;
        idx.select_nth_unstable_by(mid, |&a, &b| {
            points[a][axis].total_cmp(&points[b][axis]).then(a.cmp(&b))
        });
        let point = idx[mid];
        let node = self.nodes.len();
        self.nodes.push(Node {
            point,
            axis,
            left: None,
            right: None,
        });
        let (left, rest) = idx.split_at_mut(mid);
        let left = self.build(left);
        let right = self.build(&mut rest[1..]);
        self.nodes[node].left = left;
        self.nodes[node].right = right;
        Some(node)
    }

    /// The `k` nearest points to `query` (excluding index `exclude`), as
    /// `(distance, index)` sorted ascending.
    pub fn knn(&self, query: &[f64], k: usize, exclude: Option<usize>) -> Vec<(f64, usize)> {
        let mut heap = BinaryHeap::with_capacity(k + 1);
        if k > 0 {
            self.knn_rec(self.root, query, k, exclude, &mut heap);
        }
        let mut out: Vec<Candidate> = heap.into_vec();
        out.sort();
        out.into_iter().map(|c| (c.0.sqrt(), c.1)).collect()
    }

    fn knn_rec(
        &self,
        node: Option<usize>,
        query: &[f64],
        k: usize,
        exclude: Option<usize>,
        heap: &mut BinaryHeap<Candidate>,
    ) {
        let Some(n) = node else { return };
        let node = &self.nodes[n];
        if Some(node.point) != exclude {
            let cand = Candidate(squared_distance(query, &self.points[node.point]), node.point);
            if heap.len() < k {
                heap.push(cand);
            } else if cand < *heap.peek().expect("non-empty heap") {
                heap.pop();
                heap.push(cand);
            }
        }
        let diff = query[node.axis] - self.points[node.point][node.axis];
        let (near, far) = if diff < 0.0 {
            (node.left, node.right)
        } else {
            (node.right, node.left)
        };
        self.knn_rec(near, query, k, exclude, heap);
        let worst = heap.peek().map_or(f64::INFINITY, |c| c.0);
        if heap.len() < k || diff * diff <= worst {
            self.knn_rec(far, query, k, exclude, heap);
        }
    }

    /// Indices of all points within `radius` of `query`, ascending.
    pub fn within_radius(&self, query: &[f64], radius: f64) -> Vec<usize> {
        let mut out = Vec::new();
        self.radius_rec(self.root, query, radius, &mut out);
        out.sort_unstable();
        out
    }

    fn radius_rec(&self, node: Option<usize>, query: &[f64], radius: f64, out: &mut Vec<usize>) {
        let Some(n) = node else { return };
        let node = &self.nodes[n];
        if squared_distance(query, &self.points[node.point]).sqrt() <= radius {
            out.push(node.point);
        }
        let diff = query[node.axis] - self.points[node.point][node.axis];
        if diff <= radius {
            self.radius_rec(node.left, query, radius, out);
        }
        if -diff <= radius {
            self.radius_rec(node.right, query, radius, out);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::rng_from;
    use rand::Rng;

    #[test]
    fn knn_matches_scan_with_ties() {
        let mut rng = rng_from(11, &[]);
        // Coarse lattice makes exact distance ties common.
        let pts: Vec<Vec<f64>> = (0..300)
            .map(|_| vec![rng.random_range(0..8) as f64, rng.random_range(0..8) as f64])
            .collect();
        let tree = KdTree::new(&pts);
        for q in 0..pts.len() {
            let got = tree.knn(&pts[q], 7, Some(q));
            let mut brute: Vec<(f64, usize)> = (0..pts.len())
                .filter(|&i| i != q)
                .map(|i| (squared_distance(&pts[q], &pts[i]), i))
                .collect();
            brute.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let want: Vec<usize> = brute.iter().take(7).map(|x| x.1).collect();
            assert_eq!(got.iter().map(|x| x.1).collect::<Vec<_>>(), want);
        }
    }
}

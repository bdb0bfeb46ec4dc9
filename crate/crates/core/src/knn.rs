//! Exact k-nearest-neighbour search over Gaussian centers.
//!
//! A static KD-tree laid out implicitly over a permutation of the input
//! points. Neighbours are ordered by `(squared distance, index)` so results
//! are fully deterministic, including on ties.

use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::math::Vec3;

#[derive(Debug, Clone)]
pub struct KdTree<'a> {
    points: &'a [Vec3],
    /// Permutation of point indices; the node of range `[lo, hi)` sits at its midpoint.
    order: Vec<usize>,
    /// Split axis of the node at each position of `order`.
    axis: Vec<u8>,
}

/// A neighbour candidate: squared distance and point index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub dist2: f64,
    pub index: usize,
}

impl Neighbor {
    fn cmp_key(&self, other: &Self) -> Ordering {
        self.dist2.total_cmp(&other.dist2).then(self.index.cmp(&other.index))
    }
}

impl<'a> KdTree<'a> {
    pub fn build(points: &'a [Vec3]) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        let mut axis = alloc::vec![0u8; points.len()];
        build_range(points, &mut order, &mut axis, 0, points.len());
        Self { points, order, axis }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// The `k` nearest points to `query`, nearest first, skipping `exclude`.
    pub fn nearest(&self, query: &Vec3, k: usize, exclude: Option<usize>) -> Vec<Neighbor> {
        let mut best: Vec<Neighbor> = Vec::with_capacity(k + 1);
        if k > 0 {
            self.search(query, k, exclude, 0, self.order.len(), &mut best);
        }
        best
    }

    /// Neighbours of the point at `index` itself (the point is excluded).
    pub fn nearest_to_point(&self, index: usize, k: usize) -> Vec<Neighbor> {
        self.nearest(&self.points[index], k, Some(index))
    }

    fn search(&self, q: &Vec3, k: usize, exclude: Option<usize>, lo: usize, hi: usize, best: &mut Vec<Neighbor>) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let idx = self.order[mid];
        let p = &self.points[idx];
        if exclude != Some(idx) {
            let cand = Neighbor { dist2: crate::math::dist2(p, q), index: idx };
            insert_candidate(best, cand, k);
        }
        let ax = self.axis[mid] as usize;
        let delta = q[ax] - p[ax];
        let (near, far) = if delta < 0.0 { ((lo, mid), (mid + 1, hi)) } else { ((mid + 1, hi), (lo, mid)) };
        self.search(q, k, exclude, near.0, near.1, best);
        // Equal-distance planes are still visited so index tie-breaks stay exact.
        if best.len() < k || delta * delta <= best[best.len() - 1].dist2 {
            self.search(q, k, exclude, far.0, far.1, best);
        }
    }
}

fn insert_candidate(best: &mut Vec<Neighbor>, cand: Neighbor, k: usize) {
    if best.len() == k {
        if cand.cmp_key(&best[k - 1]) != Ordering::Less {
            return;
        }
        best.pop();
    }
    let pos = best.partition_point(|b| b.cmp_key(&cand) == Ordering::Less);
    best.insert(pos, cand);
}

fn build_range(points: &[Vec3], order: &mut [usize], axis: &mut [u8], lo: usize, hi: usize) {
    if hi - lo <= 1 {
        return;
    }
    let slice = &mut order[lo..hi];
    let mut min = [f64::INFINITY; 3];
    let mut max = [f64::NEG_INFINITY; 3];
    for &i in slice.iter() {
        for a in 0..3 {
            min[a] = min[a].min(points[i][a]);
            max[a] = max[a].max(points[i][a]);
        }
    }
    let mut ax = 0;
    for a in 1..3 {
        if max[a] - min[a] > max[ax] - min[ax] {
            ax = a;
        }
    }
    let mid = (hi - lo) / 2;
    slice.select_nth_unstable_by(mid, |&a, &b| points[a][ax].total_cmp(&points[b][ax]).then(a.cmp(&b)));
    axis[lo + mid] = ax as u8;
    build_range(points, order, axis, lo, lo + mid);
    build_range(points, order, axis, lo + mid + 1, hi);
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute(points: &[Vec3], q: usize, k: usize) -> Vec<usize> {
        let mut all: Vec<(f64, usize)> = (0..points.len())
            .filter(|&i| i != q)
            .map(|i| (crate::math::dist2(&points[i], &points[q]), i))
            .collect();
        all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        all.into_iter().take(k).map(|x| x.1).collect()
    }

    #[test]
    fn matches_brute_force_on_random_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let points: Vec<Vec3> =
            (0..200).map(|_| [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()]).collect();
        let tree = KdTree::build(&points);
        for q in 0..points.len() {
            let got: Vec<usize> = tree.nearest_to_point(q, 5).iter().map(|n| n.index).collect();
            assert_eq!(got, brute(&points, q, 5));
        }
    }

    #[test]
    fn ties_resolve_by_index() {
        // A lattice has many equidistant neighbours.
        let mut points = Vec::new();
        for x in 0..5 {
            for y in 0..5 {
                for z in 0..3 {
                    points.push([x as f64, y as f64, z as f64]);
                }
            }
        }
        let tree = KdTree::build(&points);
        for q in 0..points.len() {
            let got: Vec<usize> = tree.nearest_to_point(q, 6).iter().map(|n| n.index).collect();
            assert_eq!(got, brute(&points, q, 6), "query {q}");
        }
    }

    #[test]
    fn small_inputs() {
        let points = [[0.0, 0.0, 0.0]];
        let tree = KdTree::build(&points);
        assert!(tree.nearest_to_point(0, 3).is_empty());
        let empty: [Vec3; 0] = [];
        assert!(KdTree::build(&empty).nearest(&[0.0; 3], 2, None).is_empty());
    }
}

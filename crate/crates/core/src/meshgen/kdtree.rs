//! Exact k-nearest-neighbour queries over a static point set.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use nalgebra::Vector3;

const LEAF_SIZE: usize = 16;

enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        axis: usize,
        value: f64,
        left: Box<Node>,
        right: Box<Node>,
    },
}

pub struct KdTree<'a> {
    points: &'a [Vector3<f64>],
    order: Vec<usize>,
    root: Node,
}

/// A neighbour candidate ordered by (distance, index) so results are unique and reproducible.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub distance: f64,
}

impl Eq for Neighbor {}

impl Ord for Neighbor {
    fn cmp(&self, other: &Self) -> Ordering {
        self.distance
            .total_cmp(&other.distance)
            .then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Neighbor {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<'a> KdTree<'a> {
    pub fn new(points: &'a [Vector3<f64>]) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        let root = Self::build(points, &mut order, 0, points.len());
        Self { points, order, root }
    }

    fn build(points: &[Vector3<f64>], order: &mut [usize], start: usize, end: usize) -> Node {
        if end - start <= LEAF_SIZE {
            return Node::Leaf { start, end };
        }
        let slice = &mut order[start..end];
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
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
        let left = Box::new(Self::build(points, order, start, start + mid));
        let right = Box::new(Self::build(points, order, start + mid, end));
        Node::Split {
            axis,
            value,
            left,
            right,
        }
    }

    /// The `k` nearest points to `query`, sorted by increasing distance then index,
    /// skipping the point with index `exclude`.
    pub fn nearest(&self, query: &Vector3<f64>, k: usize, exclude: Option<usize>) -> Vec<Neighbor> {
        let mut heap: BinaryHeap<Neighbor> = BinaryHeap::with_capacity(k + 1);
        if k > 0 {
            self.search(&self.root, query, k, exclude, &mut heap);
        }
        heap.into_sorted_vec()
    }

    fn search(&self, node: &Node, q: &Vector3<f64>, k: usize, exclude: Option<usize>, heap: &mut BinaryHeap<Neighbor>) {
        match node {
            Node::Leaf { start, end } => {
                for &i in &self.order[*start..*end] {
                    if Some(i) == exclude {
                        continue;
                    }
                    let cand = Neighbor {
                        index: i,
                        distance: (self.points[i] - q).norm(),
                    };
                    if heap.len() < k {
                        heap.push(cand);
                    } else if cand < *heap.peek().expect("heap is full") {
                        heap.pop();
                        heap.push(cand);
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[*axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, k, exclude, heap);
                // Ties at the boundary distance must still be visited to keep index order exact.
                if heap.len() < k || diff.abs() <= heap.peek().expect("heap is full").distance {
                    self.search(far, q, k, exclude, heap);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn brute(points: &[Vector3<f64>], q: &Vector3<f64>, k: usize, exclude: Option<usize>) -> Vec<Neighbor> {
        let mut all: Vec<Neighbor> = points
            .iter()
            .enumerate()
            .filter(|(i, _)| Some(*i) != exclude)
            .map(|(index, p)| Neighbor {
                index,
                distance: (p - q).norm(),
            })
            .collect();
        all.sort();
        all.truncate(k);
        all
    }

    proptest! {
        #[test]
        fn matches_brute_force(seed in any::<u64>(), n in 1usize..300, k in 1usize..40, grid in any::<bool>()) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            // Integer grids create many exact distance ties.
            let pts: Vec<Vector3<f64>> = (0..n)
                .map(|_| if grid {
                    Vector3::new(rng.gen_range(0..4) as f64, rng.gen_range(0..4) as f64, rng.gen_range(0..4) as f64)
                } else {
                    Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
                })
                .collect();
            let tree = KdTree::new(&pts);
            for i in (0..n).step_by(7) {
                prop_assert_eq!(tree.nearest(&pts[i], k, Some(i)), brute(&pts, &pts[i], k, Some(i)));
            }
            let q = Vector3::new(0.3, -0.2, 1.5);
            prop_assert_eq!(tree.nearest(&q, k, None), brute(&pts, &q, k, None));
        }
    }
}

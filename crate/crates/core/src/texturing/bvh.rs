//! Bounding-volume hierarchy over mesh triangles for occlusion queries.

use nalgebra::Vector3;

use crate::meshgen::TriangleMesh;

const LEAF_SIZE: usize = 4;

#[derive(Clone, Copy, Debug)]
struct Aabb {
    lo: Vector3<f64>,
    hi: Vector3<f64>,
}

impl Aabb {
    fn empty() -> Self {
        Self {
            lo: Vector3::repeat(f64::INFINITY),
            hi: Vector3::repeat(f64::NEG_INFINITY),
        }
    }

    fn grow(&mut self, p: &Vector3<f64>) {
        self.lo = self.lo.inf(p);
        self.hi = self.hi.sup(p);
    }

    fn merge(&self, o: &Aabb) -> Aabb {
        Aabb {
            lo: self.lo.inf(&o.lo),
            hi: self.hi.sup(&o.hi),
        }
    }

    /// Slab test against the segment `origin + t·dir`, `t ∈ [0, t_max]`.
    fn hit(&self, origin: &Vector3<f64>, inv_dir: &Vector3<f64>, t_max: f64) -> bool {
        let mut t0 = 0.0f64;
        let mut t1 = t_max;
        for a in 0..3 {
            let mut near = (self.lo[a] - origin[a]) * inv_dir[a];
            let mut far = (self.hi[a] - origin[a]) * inv_dir[a];
            if near > far {
                std::mem::swap(&mut near, &mut far);
            }
            // NaN from 0·∞ means the ray runs inside the slab plane; keep the interval.
            if near.is_nan() || far.is_nan() {
                continue;
            }
            t0 = t0.max(near);
            t1 = t1.min(far);
            if t0 > t1 * (1.0 + 1e-12) {
                return false;
            }
        }
        true
    }
}

enum Node {
    Leaf {
        bounds: Aabb,
        start: usize,
        end: usize,
    },
    Inner {
        bounds: Aabb,
        left: Box<Node>,
        right: Box<Node>,
    },
}

impl Node {
    fn bounds(&self) -> &Aabb {
        match self {
            Node::Leaf { bounds, .. } | Node::Inner { bounds, .. } => bounds,
        }
    }
}

pub struct Bvh<'a> {
    mesh: &'a TriangleMesh,
    order: Vec<usize>,
    root: Option<Node>,
}

impl<'a> Bvh<'a> {
    pub fn new(mesh: &'a TriangleMesh) -> Self {
        let centroids: Vec<Vector3<f64>> = (0..mesh.triangles.len()).map(|t| mesh.centroid(t)).collect();
        let mut order: Vec<usize> = (0..mesh.triangles.len()).collect();
        let root = (!order.is_empty()).then(|| Self::build(mesh, &centroids, &mut order, 0, mesh.triangles.len()));
        Self { mesh, order, root }
    }

    fn build(mesh: &TriangleMesh, centroids: &[Vector3<f64>], order: &mut [usize], start: usize, end: usize) -> Node {
        let mut bounds = Aabb::empty();
        let mut cbounds = Aabb::empty();
        for &t in &order[start..end] {
            for c in mesh.corners(t) {
                bounds.grow(&c);
            }
            cbounds.grow(&centroids[t]);
        }
        if end - start <= LEAF_SIZE {
            return Node::Leaf { bounds, start, end };
        }
        let axis = (cbounds.hi - cbounds.lo).imax();
        let mid = (end - start) / 2;
        order[start..end].select_nth_unstable_by(mid, |&a, &b| {
            centroids[a][axis].total_cmp(&centroids[b][axis]).then(a.cmp(&b))
        });
        let left = Box::new(Self::build(mesh, centroids, order, start, start + mid));
        let right = Box::new(Self::build(mesh, centroids, order, start + mid, end));
        let bounds = left.bounds().merge(right.bounds());
        Node::Inner { bounds, left, right }
    }

    /// Whether any triangle other than `skip` crosses the open segment from `a` to `b`.
    pub fn segment_blocked(&self, a: &Vector3<f64>, b: &Vector3<f64>, skip: usize) -> bool {
        let Some(root) = &self.root else { return false };
        let d = b - a;
        let len = d.norm();
        if len == 0.0 {
            return false;
        }
        let dir = d / len;
        let inv = dir.map(|x| 1.0 / x);
        let limit = len * (1.0 - 1e-9);
        let mut stack = vec![root];
        while let Some(node) = stack.pop() {
            if !node.bounds().hit(a, &inv, limit) {
                continue;
            }
            match node {
                Node::Leaf { start, end, .. } => {
                    for &t in &self.order[*start..*end] {
                        if t == skip {
                            continue;
                        }
                        if let Some(hit) = ray_triangle(a, &dir, &self.mesh.corners(t)) {
                            if hit > 1e-12 && hit < limit {
                                return true;
                            }
                        }
                    }
                }
                Node::Inner { left, right, .. } => {
                    stack.push(left);
                    stack.push(right);
                }
            }
        }
        false
    }
}

/// Möller–Trumbore intersection distance of a unit ray with a triangle, both sides.
pub fn ray_triangle(origin: &Vector3<f64>, dir: &Vector3<f64>, tri: &[Vector3<f64>; 3]) -> Option<f64> {
    let e1 = tri[1] - tri[0];
    let e2 = tri[2] - tri[0];
    let p = dir.cross(&e2);
    let det = e1.dot(&p);
    if det.abs() < 1e-300 {
        return None;
    }
    let inv = 1.0 / det;
    let s = origin - tri[0];
    let u = s.dot(&p) * inv;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let q = s.cross(&e1);
    let v = dir.dot(&q) * inv;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    Some(e2.dot(&q) * inv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn soup(n: usize, seed: u64) -> TriangleMesh {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut vertices = Vec::new();
        let mut triangles = Vec::new();
        for t in 0..n {
            let c = Vector3::new(
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
            );
            for _ in 0..3 {
                vertices.push(
                    c + Vector3::new(
                        rng.gen_range(-0.3..0.3),
                        rng.gen_range(-0.3..0.3),
                        rng.gen_range(-0.3..0.3),
                    ),
                );
            }
            let b = 3 * t as u32;
            triangles.push([b, b + 1, b + 2]);
        }
        TriangleMesh::new(vertices, triangles)
    }

    #[test]
    fn agrees_with_linear_scan() {
        let mesh = soup(300, 1);
        let bvh = Bvh::new(&mesh);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..500 {
            let a = Vector3::new(
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
            );
            let b = Vector3::new(
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
            );
            let skip = rng.gen_range(0..300);
            let len = (b - a).norm();
            let dir = (b - a) / len;
            let brute = (0..300)
                .filter(|&t| t != skip)
                .any(|t| ray_triangle(&a, &dir, &mesh.corners(t)).is_some_and(|h| h > 1e-12 && h < len * (1.0 - 1e-9)));
            assert_eq!(bvh.segment_blocked(&a, &b, skip), brute);
        }
    }

    #[test]
    fn axis_aligned_ray_hits() {
        let mesh = TriangleMesh::new(
            vec![
                Vector3::new(-1.0, -1.0, 1.0),
                Vector3::new(1.0, -1.0, 1.0),
                Vector3::new(0.0, 1.0, 1.0),
            ],
            vec![[0, 1, 2]],
        );
        let bvh = Bvh::new(&mesh);
        assert!(bvh.segment_blocked(&Vector3::zeros(), &Vector3::new(0.0, 0.0, 2.0), 5));
        assert!(!bvh.segment_blocked(&Vector3::zeros(), &Vector3::new(0.0, 0.0, 0.5), 5));
        assert!(!bvh.segment_blocked(&Vector3::zeros(), &Vector3::new(0.0, 0.0, 2.0), 0));
    }
}

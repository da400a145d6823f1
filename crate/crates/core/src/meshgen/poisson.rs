use std::collections::HashMap;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::kdtree::KdTree;
use super::mesh::TriangleMesh;
use super::PointCloud;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoissonParams {
    /// The grid has `2^depth` cells per axis.
    pub depth: u32,
    /// Screening weight α pulling χ toward the isovalue at the samples.
    pub screening_weight: f64,
    /// Margin added on each side of the bounding cube, as a fraction of its side.
    pub padding: f64,
    pub cg_tolerance: f64,
    pub cg_max_iterations: usize,
}

impl Default for PoissonParams {
    fn default() -> Self {
        Self {
            depth: 6,
            screening_weight: 4.0,
            padding: 0.1,
            cg_tolerance: 1e-7,
            cg_max_iterations: 4000,
        }
    }
}

impl PoissonParams {
    pub fn validate(&self) -> Result<()> {
        if !(5..=8).contains(&self.depth) {
            return Err(Error::Config(format!(
                "poisson depth must lie in [5, 8], got {}",
                self.depth
            )));
        }
        if !(self.screening_weight >= 0.0 && self.screening_weight.is_finite()) {
            return Err(Error::Config("screening_weight must be non-negative".into()));
        }
        if !(self.padding > 0.0 && self.padding < 1.0) {
            return Err(Error::Config("padding must lie in (0, 1)".into()));
        }
        if !(self.cg_tolerance > 0.0) || self.cg_max_iterations == 0 {
            return Err(Error::Config("invalid conjugate-gradient limits".into()));
        }
        Ok(())
    }
}

/// Samples used to estimate the surface area each point represents.
const AREA_NEIGHBORS: usize = 8;

/// Regular grid of cell centres covering a padded cube.
struct Grid {
    n: usize,
    origin: Vector3<f64>,
    h: f64,
}

impl Grid {
    fn cells(&self) -> usize {
        self.n * self.n * self.n
    }

    fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.n * (j + self.n * k)
    }

    fn center(&self, i: usize, j: usize, k: usize) -> Vector3<f64> {
        self.origin + Vector3::new(i as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5) * self.h
    }

    /// The eight cell centres around `p` with their trilinear weights.
    fn stencil(&self, p: &Vector3<f64>) -> ([usize; 8], [f64; 8]) {
        let g = (p - self.origin) / self.h - Vector3::repeat(0.5);
        let mut base = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for a in 0..3 {
            let f = g[a].floor().clamp(0.0, (self.n - 2) as f64);
            base[a] = f as usize;
            frac[a] = (g[a] - f).clamp(0.0, 1.0);
        }
        let mut idx = [0usize; 8];
        let mut w = [0.0f64; 8];
        for c in 0..8 {
            let (dx, dy, dz) = (c & 1, (c >> 1) & 1, (c >> 2) & 1);
            idx[c] = self.index(base[0] + dx, base[1] + dy, base[2] + dz);
            w[c] = [1.0 - frac[0], frac[0]][dx] * [1.0 - frac[1], frac[1]][dy] * [1.0 - frac[2], frac[2]][dz];
        }
        (idx, w)
    }
}

struct Sample {
    cells: [usize; 8],
    weights: [f64; 8],
    beta: f64,
}

struct System<'a> {
    grid: &'a Grid,
    samples: Vec<Sample>,
}

impl System<'_> {
    /// `A u`: Neumann grid Laplacian plus the screening term.
    fn apply(&self, u: &[f64], out: &mut [f64]) {
        let n = self.grid.n;
        out.par_chunks_mut(n * n).enumerate().for_each(|(k, slab)| {
            for j in 0..n {
                for i in 0..n {
                    let c = self.grid.index(i, j, k);
                    let v = u[c];
                    let mut acc = 0.0;
                    if i > 0 {
                        acc += v - u[c - 1];
                    }
                    if i + 1 < n {
                        acc += v - u[c + 1];
                    }
                    if j > 0 {
                        acc += v - u[c - n];
                    }
                    if j + 1 < n {
                        acc += v - u[c + n];
                    }
                    if k > 0 {
                        acc += v - u[c - n * n];
                    }
                    if k + 1 < n {
                        acc += v - u[c + n * n];
                    }
                    slab[i + n * j] = acc;
                }
            }
        });
        for s in &self.samples {
            let value: f64 = s.cells.iter().zip(&s.weights).map(|(&c, &w)| w * u[c]).sum();
            for (&c, &w) in s.cells.iter().zip(&s.weights) {
                out[c] += s.beta * w * value;
            }
        }
    }

    fn diagonal(&self) -> Vec<f64> {
        let n = self.grid.n;
        let mut d = vec![0.0; self.grid.cells()];
        for k in 0..n {
            for j in 0..n {
                for i in 0..n {
                    let interior = |x: usize| 2.0 - (x == 0) as u8 as f64 - (x + 1 == n) as u8 as f64;
                    d[self.grid.index(i, j, k)] = interior(i) + interior(j) + interior(k);
                }
            }
        }
        for s in &self.samples {
            for (&c, &w) in s.cells.iter().zip(&s.weights) {
                d[c] += s.beta * w * w;
            }
        }
        d
    }
}

/// Dot product with a fixed reduction order, independent of the thread count.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    const CHUNK: usize = 4096;
    let partial: Vec<f64> = a
        .par_chunks(CHUNK)
        .zip(b.par_chunks(CHUNK))
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum())
        .collect();
    partial.iter().sum()
}

/// Jacobi-preconditioned conjugate gradients from a zero start.
fn conjugate_gradients(system: &System, b: &[f64], tolerance: f64, max_iterations: usize) -> Result<Vec<f64>> {
    let len = b.len();
    let inv_diag: Vec<f64> = system.diagonal().iter().map(|d| 1.0 / d).collect();
    let mut x = vec![0.0; len];
    let mut r = b.to_vec();
    let b_norm = dot(b, b).sqrt();
    if b_norm == 0.0 {
        return Ok(x);
    }
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(r, d)| r * d).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; len];
    for _ in 0..max_iterations {
        system.apply(&p, &mut ap);
        let alpha = rz / dot(&p, &ap);
        x.par_iter_mut().zip(&p).for_each(|(x, p)| *x += alpha * p);
        r.par_iter_mut().zip(&ap).for_each(|(r, q)| *r -= alpha * q);
        if dot(&r, &r).sqrt() <= tolerance * b_norm {
            return Ok(x);
        }
        z.par_iter_mut()
            .zip(&r)
            .zip(&inv_diag)
            .for_each(|((z, r), d)| *z = r * d);
        let rz_next = dot(&r, &z);
        let beta = rz_next / rz;
        rz = rz_next;
        p.par_iter_mut().zip(&z).for_each(|(p, z)| *p = z + beta * *p);
    }
    Err(Error::Numerical(format!(
        "conjugate gradients stopped after {max_iterations} iterations with relative residual {:e}",
        dot(&r, &r).sqrt() / b_norm
    )))
}

/// Screened Poisson surface reconstruction on a uniform grid.
///
/// The indicator χ grows along the supplied normals, and the returned triangles wind so their
/// normals point the same way. The result is the largest connected component of the level set
/// of χ at its mean over the samples.
pub fn poisson_reconstruct(cloud: &PointCloud, params: &PoissonParams) -> Result<TriangleMesh> {
    params.validate()?;
    let Some(normals) = &cloud.normals else {
        return Err(Error::InvalidInput(
            "Poisson reconstruction needs oriented normals".into(),
        ));
    };
    cloud.validate()?;
    if cloud.len() <= AREA_NEIGHBORS {
        return Err(Error::InvalidInput(format!(
            "Poisson reconstruction needs more than {AREA_NEIGHBORS} points, got {}",
            cloud.len()
        )));
    }
    let pts = &cloud.points;
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for p in pts {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let side = (hi - lo).max();
    if !(side > 0.0) {
        return Err(Error::Degenerate("all samples coincide".into()));
    }
    let n = 1usize << params.depth;
    let full = side * (1.0 + 2.0 * params.padding);
    let grid = Grid {
        n,
        h: full / n as f64,
        origin: (lo + hi) / 2.0 - Vector3::repeat(full / 2.0),
    };
    let h = grid.h;

    let tree = KdTree::new(pts);
    let areas: Vec<f64> = (0..pts.len())
        .into_par_iter()
        .map(|i| {
            let r = tree
                .nearest(&pts[i], AREA_NEIGHBORS, Some(i))
                .last()
                .map_or(0.0, |x| x.distance);
            std::f64::consts::PI * r * r / AREA_NEIGHBORS as f64
        })
        .collect();

    let mut field = vec![Vector3::<f64>::zeros(); grid.cells()];
    let mut samples = Vec::with_capacity(pts.len());
    for (i, p) in pts.iter().enumerate() {
        let (cells, weights) = grid.stencil(p);
        let strength = normals[i] * (areas[i] / (h * h * h));
        for (&c, &w) in cells.iter().zip(&weights) {
            field[c] += strength * w;
        }
        samples.push(Sample {
            cells,
            weights,
            beta: params.screening_weight * areas[i] / (h * h),
        });
    }

    // Right-hand side Gᵀ(h·V) over the grid edges, V averaged onto each edge.
    let mut rhs = vec![0.0; grid.cells()];
    let strides = [1, n, n * n];
    for k in 0..n {
        for j in 0..n {
            for i in 0..n {
                let c = grid.index(i, j, k);
                for (axis, coord) in [i, j, k].into_iter().enumerate() {
                    if coord + 1 < n {
                        let d = c + strides[axis];
                        let flux = h * 0.5 * (field[c][axis] + field[d][axis]);
                        rhs[d] += flux;
                        rhs[c] -= flux;
                    }
                }
            }
        }
    }

    let system = System { grid: &grid, samples };
    let chi = conjugate_gradients(&system, &rhs, params.cg_tolerance, params.cg_max_iterations)?;
    let iso = system
        .samples
        .iter()
        .map(|s| s.cells.iter().zip(&s.weights).map(|(&c, &w)| w * chi[c]).sum::<f64>())
        .sum::<f64>()
        / system.samples.len() as f64;
    let mesh = marching_tetrahedra(&grid, &chi, iso);
    if mesh.triangles.is_empty() {
        return Err(Error::ReconstructionFailure(
            "the indicator function has an empty level set".into(),
        ));
    }
    let mut mesh = mesh.largest_component();
    mesh.compute_vertex_normals();
    Ok(mesh)
}

/// Kuhn decomposition of the unit cube into six tetrahedra sharing the 0–7 diagonal;
/// corner `c` sits at offset `(c & 1, c >> 1 & 1, c >> 2 & 1)`.
const KUHN: [[usize; 4]; 6] = [
    [0, 1, 3, 7],
    [0, 1, 5, 7],
    [0, 2, 3, 7],
    [0, 2, 6, 7],
    [0, 4, 5, 7],
    [0, 4, 6, 7],
];

fn marching_tetrahedra(grid: &Grid, values: &[f64], iso: f64) -> TriangleMesh {
    let n = grid.n;
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    let mut edge_vertex: HashMap<(usize, usize), u32> = HashMap::new();
    let lattice = |c: usize| -> [i64; 3] { [(c % n) as i64, ((c / n) % n) as i64, (c / (n * n)) as i64] };
    let mut vertex_on = |a: usize, b: usize, vertices: &mut Vec<Vector3<f64>>| -> u32 {
        let key = (a.min(b), a.max(b));
        if let Some(&v) = edge_vertex.get(&key) {
            return v;
        }
        let (p, q) = key;
        let t = (iso - values[p]) / (values[q] - values[p]);
        let [pi, pj, pk] = lattice(p);
        let [qi, qj, qk] = lattice(q);
        let pp = grid.center(pi as usize, pj as usize, pk as usize);
        let qq = grid.center(qi as usize, qj as usize, qk as usize);
        vertices.push(pp + (qq - pp) * t);
        let v = (vertices.len() - 1) as u32;
        edge_vertex.insert(key, v);
        v
    };
    for k in 0..n - 1 {
        for j in 0..n - 1 {
            for i in 0..n - 1 {
                let corner = |c: usize| grid.index(i + (c & 1), j + ((c >> 1) & 1), k + ((c >> 2) & 1));
                for tet in &KUHN {
                    let ids = tet.map(corner);
                    let above = ids.map(|c| values[c] > iso);
                    let count = above.iter().filter(|&&a| a).count();
                    if count == 0 || count == 4 {
                        continue;
                    }
                    // Partition the corners independently of which side is above, so that
                    // negating the field yields the same triangles with reversed winding.
                    let mut faces: Vec<[(usize, usize); 3]> = Vec::with_capacity(2);
                    if count == 1 || count == 3 {
                        let lone = (0..4)
                            .find(|&v| above.iter().filter(|&&a| a == above[v]).count() == 1)
                            .expect("one corner differs");
                        let others: Vec<usize> = (0..4).filter(|&v| v != lone).collect();
                        faces.push([(lone, others[0]), (lone, others[1]), (lone, others[2])]);
                    } else {
                        let b = (1..4)
                            .find(|&v| above[v] == above[0])
                            .expect("two corners share a side");
                        let rest: Vec<usize> = (1..4).filter(|&v| v != b).collect();
                        let (a, p, q) = (0, rest[0], rest[1]);
                        faces.push([(a, p), (a, q), (b, q)]);
                        faces.push([(a, p), (b, q), (b, p)]);
                    }
                    let pos = ids.map(lattice);
                    // Orientation from exact lattice arithmetic on the edge midpoints.
                    let (n_above, n_below) = (count as i64, 4 - count as i64);
                    let mut dir = [0i64; 3];
                    for a in 0..3 {
                        let sa: i64 = (0..4).filter(|&v| above[v]).map(|v| pos[v][a]).sum();
                        let sb: i64 = (0..4).filter(|&v| !above[v]).map(|v| pos[v][a]).sum();
                        dir[a] = sa * n_below - sb * n_above;
                    }
                    for face in faces {
                        let mid = face.map(|(x, y)| [0, 1, 2].map(|a| pos[x][a] + pos[y][a]));
                        let e1 = [0, 1, 2].map(|a| mid[1][a] - mid[0][a]);
                        let e2 = [0, 1, 2].map(|a| mid[2][a] - mid[0][a]);
                        let normal = [
                            e1[1] * e2[2] - e1[2] * e2[1],
                            e1[2] * e2[0] - e1[0] * e2[2],
                            e1[0] * e2[1] - e1[1] * e2[0],
                        ];
                        let s: i64 = (0..3).map(|a| normal[a] * dir[a]).sum();
                        let v = face.map(|(x, y)| vertex_on(ids[x], ids[y], &mut vertices));
                        triangles.push(if s > 0 { v } else { [v[0], v[2], v[1]] });
                    }
                }
            }
        }
    }
    TriangleMesh::new(vertices, triangles)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::meshgen::normals::tests::sphere;

    fn oriented_sphere(n: usize, seed: u64, inward: bool) -> PointCloud {
        let pts = sphere(n, seed);
        let mut c = PointCloud::new(pts.clone());
        c.normals = Some(pts.iter().map(|p| if inward { -p } else { *p }).collect());
        c
    }

    fn radial_rms(mesh: &TriangleMesh) -> f64 {
        (mesh.vertices.iter().map(|v| (v.norm() - 1.0).powi(2)).sum::<f64>() / mesh.vertices.len() as f64).sqrt()
    }

    #[test]
    fn unit_sphere_is_recovered() {
        let cloud = oriented_sphere(10_000, 9, false);
        let mesh = poisson_reconstruct(&cloud, &PoissonParams::default()).unwrap();
        mesh.validate().unwrap();
        assert!(mesh.is_closed_manifold());
        assert_eq!(mesh.euler_characteristic(), 2);
        let rms = radial_rms(&mesh);
        assert!(rms < 0.02, "radial rms {rms}");
        // Outward normals give outward-facing triangles.
        let outward = (0..mesh.triangles.len())
            .filter(|&t| mesh.face_normal(t).dot(&mesh.centroid(t)) > 0.0)
            .count();
        assert_eq!(outward, mesh.triangles.len());
        let bound = 1.0 * (1.0 + 2.0 * 0.1);
        assert!(mesh
            .vertices
            .iter()
            .all(|v| v.iter().all(|x| x.is_finite() && x.abs() <= bound)));
    }

    #[test]
    fn flipped_normals_reverse_winding() {
        let params = PoissonParams {
            depth: 5,
            ..PoissonParams::default()
        };
        let a = poisson_reconstruct(&oriented_sphere(3000, 2, false), &params).unwrap();
        let b = poisson_reconstruct(&oriented_sphere(3000, 2, true), &params).unwrap();
        assert_eq!(a.vertices.len(), b.vertices.len());
        for (p, q) in a.vertices.iter().zip(&b.vertices) {
            assert!((p - q).norm() < 1e-6);
        }
        assert_eq!(a.flipped().triangles, b.triangles);
    }

    #[test]
    fn deterministic() {
        let params = PoissonParams {
            depth: 5,
            ..PoissonParams::default()
        };
        let c = oriented_sphere(2000, 3, true);
        assert_eq!(
            poisson_reconstruct(&c, &params).unwrap(),
            poisson_reconstruct(&c, &params).unwrap()
        );
    }

    #[test]
    fn input_checks() {
        let mut c = oriented_sphere(100, 1, false);
        let bad = PoissonParams {
            depth: 9,
            ..PoissonParams::default()
        };
        assert!(matches!(poisson_reconstruct(&c, &bad), Err(Error::Config(_))));
        c.normals = None;
        assert!(poisson_reconstruct(&c, &PoissonParams::default()).is_err());
        let tiny = oriented_sphere(5, 1, false);
        assert!(poisson_reconstruct(&tiny, &PoissonParams::default()).is_err());
        let stalled = PoissonParams {
            depth: 5,
            cg_max_iterations: 2,
            ..PoissonParams::default()
        };
        assert!(matches!(
            poisson_reconstruct(&oriented_sphere(500, 1, false), &stalled),
            Err(Error::Numerical(_))
        ));
    }
}

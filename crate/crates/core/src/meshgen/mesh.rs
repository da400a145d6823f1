use std::collections::HashMap;

use nalgebra::Vector3;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Vector3<f64>>,
    pub triangles: Vec<[u32; 3]>,
    pub normals: Option<Vec<Vector3<f64>>>,
}

impl TriangleMesh {
    pub fn new(vertices: Vec<Vector3<f64>>, triangles: Vec<[u32; 3]>) -> Self {
        Self {
            vertices,
            triangles,
            normals: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len();
        for (i, t) in self.triangles.iter().enumerate() {
            if t.iter().any(|&v| v as usize >= n) {
                return Err(Error::InvalidInput(format!("triangle {i} indexes past {n} vertices")));
            }
            if t[0] == t[1] || t[1] == t[2] || t[0] == t[2] {
                return Err(Error::InvalidInput(format!("triangle {i} repeats a vertex")));
            }
        }
        if self.vertices.iter().any(|v| !v.iter().all(|x| x.is_finite())) {
            return Err(Error::InvalidInput("mesh has non-finite vertices".into()));
        }
        if let Some(normals) = &self.normals {
            if normals.len() != n {
                return Err(Error::InvalidInput(
                    "vertex normal count differs from vertex count".into(),
                ));
            }
        }
        Ok(())
    }

    /// Unnormalized face normal, twice the triangle area in length.
    pub fn face_normal(&self, t: usize) -> Vector3<f64> {
        let [a, b, c] = self.corners(t);
        (b - a).cross(&(c - a))
    }

    pub fn corners(&self, t: usize) -> [Vector3<f64>; 3] {
        self.triangles[t].map(|v| self.vertices[v as usize])
    }

    pub fn centroid(&self, t: usize) -> Vector3<f64> {
        let [a, b, c] = self.corners(t);
        (a + b + c) / 3.0
    }

    /// Number of triangles using each undirected edge.
    pub fn edge_use(&self) -> HashMap<(u32, u32), usize> {
        let mut edges = HashMap::with_capacity(self.triangles.len() * 3 / 2);
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                *edges.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        edges
    }

    /// Every edge is shared by exactly two triangles with opposite directions.
    pub fn is_closed_manifold(&self) -> bool {
        if self.triangles.is_empty() {
            return false;
        }
        let mut directed: HashMap<(u32, u32), usize> = HashMap::with_capacity(self.triangles.len() * 3);
        for t in &self.triangles {
            for k in 0..3 {
                *directed.entry((t[k], t[(k + 1) % 3])).or_insert(0) += 1;
            }
        }
        directed
            .iter()
            .all(|(&(a, b), &n)| n == 1 && directed.get(&(b, a)) == Some(&1))
            && self.vertex_fans_are_disks()
    }

    /// Each vertex's incident triangles form a single cycle around it.
    fn vertex_fans_are_disks(&self) -> bool {
        let mut next: Vec<Vec<(u32, u32)>> = vec![Vec::new(); self.vertices.len()];
        for t in &self.triangles {
            for k in 0..3 {
                next[t[k] as usize].push((t[(k + 1) % 3], t[(k + 2) % 3]));
            }
        }
        next.iter().all(|fan| {
            if fan.is_empty() {
                return true;
            }
            let mut current = fan[0].1;
            let mut steps = 1;
            while current != fan[0].0 {
                let Some(&(_, c)) = fan.iter().find(|(a, _)| *a == current) else {
                    return false;
                };
                current = c;
                steps += 1;
                if steps > fan.len() {
                    return false;
                }
            }
            steps == fan.len()
        })
    }

    /// `V − E + F` over the referenced vertices.
    pub fn euler_characteristic(&self) -> i64 {
        let mut used = vec![false; self.vertices.len()];
        for t in &self.triangles {
            for &v in t {
                used[v as usize] = true;
            }
        }
        let v = used.iter().filter(|&&u| u).count() as i64;
        v - self.edge_use().len() as i64 + self.triangles.len() as i64
    }

    /// Triangle sets of the edge-connected components, largest first; ties keep the
    /// component whose first triangle comes first.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let mut parent: Vec<usize> = (0..self.triangles.len()).collect();
        fn find(parent: &mut [usize], mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        let mut owner: HashMap<(u32, u32), usize> = HashMap::new();
        for (i, t) in self.triangles.iter().enumerate() {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                match owner.get(&(a.min(b), a.max(b))) {
                    Some(&j) => {
                        let (ra, rb) = (find(&mut parent, i), find(&mut parent, j));
                        parent[ra.max(rb)] = ra.min(rb);
                    }
                    None => {
                        owner.insert((a.min(b), a.max(b)), i);
                    }
                }
            }
        }
        let mut groups: Vec<Vec<usize>> = Vec::new();
        let mut slot: HashMap<usize, usize> = HashMap::new();
        for i in 0..self.triangles.len() {
            let r = find(&mut parent, i);
            let g = *slot.entry(r).or_insert_with(|| {
                groups.push(Vec::new());
                groups.len() - 1
            });
            groups[g].push(i);
        }
        groups.sort_by(|a, b| b.len().cmp(&a.len()).then(a[0].cmp(&b[0])));
        groups
    }

    /// Mesh of the given triangles, keeping the used vertices in their original order.
    pub fn subset(&self, triangles: &[usize]) -> Self {
        let mut map = vec![u32::MAX; self.vertices.len()];
        for &t in triangles {
            for &v in &self.triangles[t] {
                map[v as usize] = 0;
            }
        }
        let mut used = Vec::new();
        for (v, slot) in map.iter_mut().enumerate() {
            if *slot == 0 {
                *slot = used.len() as u32;
                used.push(v);
            }
        }
        Self {
            vertices: used.iter().map(|&v| self.vertices[v]).collect(),
            triangles: triangles
                .iter()
                .map(|&t| self.triangles[t].map(|v| map[v as usize]))
                .collect(),
            normals: self.normals.as_ref().map(|n| used.iter().map(|&v| n[v]).collect()),
        }
    }

    /// Largest edge-connected component.
    pub fn largest_component(&self) -> Self {
        match self.components().first() {
            Some(c) => self.subset(c),
            None => self.clone(),
        }
    }

    /// Area-weighted unit vertex normals following the triangle winding.
    pub fn compute_vertex_normals(&mut self) {
        let mut acc = vec![Vector3::zeros(); self.vertices.len()];
        for t in 0..self.triangles.len() {
            let n = self.face_normal(t);
            for &v in &self.triangles[t] {
                acc[v as usize] += n;
            }
        }
        self.normals = Some(
            acc.into_iter()
                .map(|n| n.try_normalize(1e-300).unwrap_or_else(Vector3::z))
                .collect(),
        );
    }

    /// Same surface with every triangle's winding reversed.
    pub fn flipped(&self) -> Self {
        Self {
            vertices: self.vertices.clone(),
            triangles: self.triangles.iter().map(|t| [t[0], t[2], t[1]]).collect(),
            normals: self.normals.as_ref().map(|n| n.iter().map(|v| -v).collect()),
        }
    }
}

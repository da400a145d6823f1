//! Wavefront OBJ/MTL export and a reader for the subset this crate writes.

use std::fmt::Write;

use nalgebra::{Vector2, Vector3};

use crate::error::{Error, Result};
use crate::meshgen::TriangleMesh;

/// One corner of an OBJ face, zero-based.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FaceVertex {
    pub position: u32,
    pub uv: Option<u32>,
    pub normal: Option<u32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ObjData {
    pub positions: Vec<Vector3<f64>>,
    pub uvs: Vec<Vector2<f64>>,
    pub normals: Vec<Vector3<f64>>,
    pub faces: Vec<[FaceVertex; 3]>,
    pub material_libs: Vec<String>,
}

impl ObjData {
    pub fn to_mesh(&self) -> TriangleMesh {
        TriangleMesh::new(
            self.positions.clone(),
            self.faces.iter().map(|f| f.map(|c| c.position)).collect(),
        )
    }
}

/// OBJ text for `mesh`; with `uvs` (three per triangle) the faces reference texture
/// coordinates and material `material` from `mtllib`.
pub fn write_obj(
    mesh: &TriangleMesh,
    uvs: Option<&[[Vector2<f64>; 3]]>,
    mtllib: Option<(&str, &str)>,
) -> Result<String> {
    mesh.validate()?;
    if uvs.is_some_and(|u| u.len() != mesh.triangles.len()) {
        return Err(Error::Export("uv count differs from triangle count".into()));
    }
    let mut out = String::new();
    if let Some((lib, material)) = mtllib {
        writeln!(out, "mtllib {lib}\nusemtl {material}").expect("string write");
    }
    for v in &mesh.vertices {
        writeln!(out, "v {} {} {}", v.x, v.y, v.z).expect("string write");
    }
    if let Some(normals) = &mesh.normals {
        for n in normals {
            writeln!(out, "vn {} {} {}", n.x, n.y, n.z).expect("string write");
        }
    }
    if let Some(uvs) = uvs {
        for corner in uvs.iter().flatten() {
            writeln!(out, "vt {} {}", corner.x, corner.y).expect("string write");
        }
    }
    let with_normals = mesh.normals.is_some();
    for (t, tri) in mesh.triangles.iter().enumerate() {
        out.push('f');
        for (k, &v) in tri.iter().enumerate() {
            let v = v + 1;
            let vt = 3 * t + k + 1;
            match (uvs.is_some(), with_normals) {
                (true, true) => write!(out, " {v}/{vt}/{v}"),
                (true, false) => write!(out, " {v}/{vt}"),
                (false, true) => write!(out, " {v}//{v}"),
                (false, false) => write!(out, " {v}"),
            }
            .expect("string write");
        }
        out.push('\n');
    }
    Ok(out)
}

/// Material file referencing a diffuse texture.
pub fn write_mtl(material: &str, texture: &str) -> String {
    format!("newmtl {material}\nKa 1 1 1\nKd 1 1 1\nKs 0 0 0\nillum 1\nmap_Kd {texture}\n")
}

fn resolve(index: &str, count: usize, what: &str, line: usize) -> Result<u32> {
    let i: i64 = index
        .parse()
        .map_err(|_| Error::parse("obj", line, format!("bad {what} index {index:?}")))?;
    let resolved = if i > 0 { i - 1 } else { count as i64 + i };
    if i == 0 || resolved < 0 || resolved >= count as i64 {
        return Err(Error::parse("obj", line, format!("{what} index {i} out of range")));
    }
    Ok(resolved as u32)
}

fn floats<const N: usize>(words: &[&str], line: usize) -> Result<[f64; N]> {
    if words.len() < N {
        return Err(Error::parse("obj", line, format!("expected {N} numbers")));
    }
    let mut out = [0.0; N];
    for (o, w) in out.iter_mut().zip(words) {
        *o = w
            .parse()
            .ok()
            .filter(|v: &f64| v.is_finite())
            .ok_or_else(|| Error::parse("obj", line, format!("bad number {w:?}")))?;
    }
    Ok(out)
}

/// Parses positions, texture coordinates, normals and faces; polygons are fanned into
/// triangles and negative indices resolved.
pub fn read_obj(text: &str) -> Result<ObjData> {
    let mut out = ObjData::default();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("");
        let words: Vec<&str> = content.split_whitespace().collect();
        let Some((&head, rest)) = words.split_first() else {
            continue;
        };
        match head {
            "v" => out.positions.push(Vector3::from(floats::<3>(rest, line)?)),
            "vt" => out.uvs.push(Vector2::from(floats::<2>(rest, line)?)),
            "vn" => out.normals.push(Vector3::from(floats::<3>(rest, line)?)),
            "f" => {
                if rest.len() < 3 {
                    return Err(Error::parse("obj", line, "face with fewer than three corners"));
                }
                let corners = rest
                    .iter()
                    .map(|w| {
                        let mut parts = w.split('/');
                        let v = resolve(parts.next().unwrap_or(""), out.positions.len(), "vertex", line)?;
                        let vt = match parts.next() {
                            Some("") | None => None,
                            Some(s) => Some(resolve(s, out.uvs.len(), "texture", line)?),
                        };
                        let vn = match parts.next() {
                            Some("") | None => None,
                            Some(s) => Some(resolve(s, out.normals.len(), "normal", line)?),
                        };
                        if parts.next().is_some() {
                            return Err(Error::parse("obj", line, format!("bad face corner {w:?}")));
                        }
                        Ok(FaceVertex {
                            position: v,
                            uv: vt,
                            normal: vn,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                for k in 1..corners.len() - 1 {
                    out.faces.push([corners[0], corners[k], corners[k + 1]]);
                }
            }
            "mtllib" => out.material_libs.push(rest.join(" ")),
            "usemtl" | "o" | "g" | "s" => {}
            other => return Err(Error::parse("obj", line, format!("unsupported statement {other:?}"))),
        }
    }
    Ok(out)
}

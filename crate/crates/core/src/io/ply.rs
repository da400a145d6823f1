//! Binary little-endian PLY for point clouds and triangle meshes.

use std::io::Write;

use nalgebra::Vector3;

use crate::error::{Error, Result};

/// Contents of a PLY file this crate understands: vertices with optional colours and
/// optional triangular faces.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PlyData {
    pub vertices: Vec<Vector3<f64>>,
    pub colors: Option<Vec<[u8; 3]>>,
    pub faces: Vec<[u32; 3]>,
}

pub fn write_ply(data: &PlyData) -> Result<Vec<u8>> {
    if data.colors.as_ref().is_some_and(|c| c.len() != data.vertices.len()) {
        return Err(Error::Export("colour count differs from vertex count".into()));
    }
    let mut out = Vec::new();
    write!(
        out,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\n",
        data.vertices.len()
    )?;
    if data.colors.is_some() {
        out.extend_from_slice(b"property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    if !data.faces.is_empty() {
        write!(
            out,
            "element face {}\nproperty list uchar uint vertex_indices\n",
            data.faces.len()
        )?;
    }
    out.extend_from_slice(b"end_header\n");
    for (i, v) in data.vertices.iter().enumerate() {
        for c in v.iter() {
            out.extend_from_slice(&c.to_le_bytes());
        }
        if let Some(colors) = &data.colors {
            out.extend_from_slice(&colors[i]);
        }
    }
    for f in &data.faces {
        out.push(3);
        for i in f {
            out.extend_from_slice(&i.to_le_bytes());
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => Self::I8,
            "uchar" | "uint8" => Self::U8,
            "short" | "int16" => Self::I16,
            "ushort" | "uint16" => Self::U16,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    fn read(self, b: &[u8]) -> f64 {
        match self {
            Self::I8 => b[0] as i8 as f64,
            Self::U8 => b[0] as f64,
            Self::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Self::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Self::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::F64 => f64::from_le_bytes(b[..8].try_into().expect("eight bytes")),
        }
    }
}

#[derive(Debug)]
enum Property {
    Scalar(String, Scalar),
    List(String, Scalar, Scalar),
}

#[derive(Debug)]
struct Element {
    name: String,
    count: usize,
    properties: Vec<Property>,
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.data.len());
        let Some(end) = end else {
            return Err(Error::parse("ply", 0, "unexpected end of binary data"));
        };
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn scalar(&mut self, t: Scalar) -> Result<f64> {
        Ok(t.read(self.take(t.size())?))
    }
}

fn parse_header(text: &str) -> Result<Vec<Element>> {
    let mut lines = text.lines().enumerate();
    if lines.next().map(|(_, l)| l.trim()) != Some("ply") {
        return Err(Error::parse("ply", 1, "missing 'ply' magic"));
    }
    let mut elements: Vec<Element> = Vec::new();
    let mut format_seen = false;
    for (i, line) in lines {
        let line_no = i + 1;
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["format", "binary_little_endian", "1.0"] => format_seen = true,
            ["format", other, ..] => {
                return Err(Error::parse("ply", line_no, format!("unsupported format {other}")));
            }
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => {
                let count = count
                    .parse()
                    .map_err(|_| Error::parse("ply", line_no, format!("bad element count {count:?}")))?;
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    properties: Vec::new(),
                });
            }
            ["property", "list", count_t, item_t, name] => {
                let (Some(c), Some(t)) = (Scalar::parse(count_t), Scalar::parse(item_t)) else {
                    return Err(Error::parse("ply", line_no, "unknown list property type"));
                };
                let Some(el) = elements.last_mut() else {
                    return Err(Error::parse("ply", line_no, "property before any element"));
                };
                el.properties.push(Property::List(name.to_string(), c, t));
            }
            ["property", t, name] => {
                let Some(t) = Scalar::parse(t) else {
                    return Err(Error::parse("ply", line_no, format!("unknown property type {t:?}")));
                };
                let Some(el) = elements.last_mut() else {
                    return Err(Error::parse("ply", line_no, "property before any element"));
                };
                el.properties.push(Property::Scalar(name.to_string(), t));
            }
            _ => {
                return Err(Error::parse(
                    "ply",
                    line_no,
                    format!("unrecognized header line {line:?}"),
                ))
            }
        }
    }
    if !format_seen {
        return Err(Error::parse("ply", 0, "missing format line"));
    }
    Ok(elements)
}

/// Parses a binary little-endian PLY with a `vertex` element (x, y, z and optional red,
/// green, blue) and an optional `face` element of triangles.
pub fn read_ply(bytes: &[u8]) -> Result<PlyData> {
    const END: &[u8] = b"end_header\n";
    let Some(split) = bytes.windows(END.len()).position(|w| w == END) else {
        return Err(Error::parse("ply", 0, "missing end_header"));
    };
    let header = std::str::from_utf8(&bytes[..split]).map_err(|_| Error::parse("ply", 0, "header is not UTF-8"))?;
    let elements = parse_header(header)?;
    let mut reader = Reader {
        data: bytes,
        pos: split + END.len(),
    };
    let mut out = PlyData::default();
    for el in &elements {
        // Every record needs at least one byte, which bounds allocations on hostile counts.
        if el.count > reader.data.len() - reader.pos {
            return Err(Error::parse(
                "ply",
                0,
                format!("element {} count exceeds file size", el.name),
            ));
        }
        let find = |n: &str| {
            el.properties
                .iter()
                .position(|p| matches!(p, Property::Scalar(name, _) if name == n))
        };
        let xyz = [find("x"), find("y"), find("z")];
        let rgb = [find("red"), find("green"), find("blue")];
        let is_vertex = el.name == "vertex";
        if is_vertex && xyz.iter().any(Option::is_none) {
            return Err(Error::parse("ply", 0, "vertex element lacks x, y or z"));
        }
        let with_color = is_vertex && rgb.iter().all(Option::is_some);
        if with_color {
            out.colors = Some(Vec::with_capacity(el.count));
        }
        let mut values = vec![0.0; el.properties.len()];
        for _ in 0..el.count {
            let mut face: Option<[u32; 3]> = None;
            for (k, p) in el.properties.iter().enumerate() {
                match p {
                    Property::Scalar(_, t) => values[k] = reader.scalar(*t)?,
                    Property::List(name, ct, it) => {
                        let n = reader.scalar(*ct)?;
                        if !(0.0..=1e6).contains(&n) {
                            return Err(Error::parse("ply", 0, "invalid list length"));
                        }
                        let mut items = Vec::with_capacity(n as usize);
                        for _ in 0..n as usize {
                            items.push(reader.scalar(*it)?);
                        }
                        if el.name == "face" && (name == "vertex_indices" || name == "vertex_index") {
                            if items.len() != 3 {
                                return Err(Error::parse("ply", 0, "only triangular faces are supported"));
                            }
                            let mut f = [0u32; 3];
                            for (slot, v) in f.iter_mut().zip(&items) {
                                if !(*v >= 0.0 && *v <= u32::MAX as f64) || v.fract() != 0.0 {
                                    return Err(Error::parse("ply", 0, "invalid face index"));
                                }
                                *slot = *v as u32;
                            }
                            face = Some(f);
                        }
                    }
                }
            }
            if is_vertex {
                let [x, y, z] = xyz.map(|i| values[i.expect("checked above")]);
                out.vertices.push(Vector3::new(x, y, z));
                if let Some(colors) = out.colors.as_mut() {
                    colors.push(rgb.map(|i| values[i.expect("checked above")].clamp(0.0, 255.0) as u8));
                }
            }
            if let Some(f) = face {
                out.faces.push(f);
            }
        }
    }
    let n = out.vertices.len();
    if out.faces.iter().flatten().any(|&i| i as usize >= n) {
        return Err(Error::parse("ply", 0, "face index out of range"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cloud_round_trip() {
        let data = PlyData {
            vertices: vec![Vector3::new(1.0, -2.5, 3.25), Vector3::new(0.1, 0.2, 0.3)],
            colors: Some(vec![[1, 2, 3], [250, 128, 0]]),
            faces: vec![],
        };
        let bytes = write_ply(&data).unwrap();
        assert!(bytes.starts_with(b"ply\nformat binary_little_endian 1.0\n"));
        assert_eq!(read_ply(&bytes).unwrap(), data);
    }

    #[test]
    fn reads_float_vertices_and_ignores_extra_properties() {
        let mut bytes = b"ply\nformat binary_little_endian 1.0\ncomment x\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nproperty float nx\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n".to_vec();
        for v in [1.5f32, 2.0, -1.0, 9.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes.push(3);
        for i in [0i32, 0, 0] {
            bytes.extend_from_slice(&i.to_le_bytes());
        }
        let d = read_ply(&bytes).unwrap();
        assert_eq!(d.vertices, vec![Vector3::new(1.5, 2.0, -1.0)]);
        assert_eq!(d.faces, vec![[0, 0, 0]]);
        assert!(d.colors.is_none());
    }

    #[test]
    fn rejects_malformed_input() {
        assert!(read_ply(b"").is_err());
        assert!(read_ply(b"ply\nformat ascii 1.0\nend_header\n").is_err());
        assert!(read_ply(b"ply\nformat binary_little_endian 1.0\nelement vertex 5\nproperty double x\nproperty double y\nproperty double z\nend_header\n").is_err());
        let data = PlyData {
            vertices: vec![Vector3::zeros()],
            colors: None,
            faces: vec![[0, 0, 1]],
        };
        assert!(read_ply(&write_ply(&data).unwrap()).is_err());
    }

    proptest! {
        #[test]
        fn mesh_round_trip(vs in prop::collection::vec(prop::array::uniform3(-1e6f64..1e6), 1..50), seed in any::<u64>()) {
            let n = vs.len() as u64;
            let faces: Vec<[u32; 3]> = (0..10u64).map(|i| {
                let h = seed.wrapping_mul(6364136223846793005).wrapping_add(i);
                [(h % n) as u32, ((h >> 8) % n) as u32, ((h >> 16) % n) as u32]
            }).collect();
            let data = PlyData { vertices: vs.into_iter().map(Vector3::from).collect(), colors: None, faces };
            prop_assert_eq!(read_ply(&write_ply(&data).unwrap()).unwrap(), data);
        }
    }
}

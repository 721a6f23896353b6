//! Triangle meshes and the Wavefront OBJ subset they are loaded from.
//!
//! Supported grammar, one statement per line:
//!
//! ```text
//! v  <x> <y> <z> [w]        vertex position (w ignored)
//! vn <x> <y> <z>            vertex normal (normalized on load)
//! f  <a> <b> <c>            triangle; each corner is `v`, `v/vt`, `v//vn` or `v/vt/vn`
//! ```
//!
//! Indices are 1-based; negative indices are relative to the vertices read so
//! far. `vt`, `vp`, `o`, `g`, `s`, `mtllib` and `usemtl` lines, blank lines and
//! `#` comments are ignored. Texture coordinates are not used: textures are
//! per-face barycentric grids. Faces with more than three corners are rejected.

use std::path::Path;

use thiserror::Error;

use crate::geometry::Vec3;
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("cannot read mesh file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed statement: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: face has {corners} vertices; only triangles are supported")]
    NonTriangleFace { line: usize, corners: usize },
    #[error("line {line}: vertex index {index} out of range ({count} vertices)")]
    IndexOutOfRange {
        line: usize,
        index: i64,
        count: usize,
    },
    #[error("line {line}: face repeats vertex {index}")]
    RepeatedVertex { line: usize, index: usize },
    #[error("line {line}: degenerate face with zero area")]
    DegenerateFace { line: usize },
}

/// Triangle mesh with derived flat face normals.
///
/// `line` fields of errors raised by [`Mesh::new`] hold the face index (0-based)
/// instead of a file line.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh<T> {
    vertices: Vec<Vec3<T>>,
    normals: Vec<Vec3<T>>,
    faces: Vec<[u32; 3]>,
    face_normals: Vec<Vec3<T>>,
}

impl<T: Scalar> Mesh<T> {
    pub fn new(
        vertices: Vec<Vec3<T>>,
        normals: Vec<Vec3<T>>,
        faces: Vec<[u32; 3]>,
    ) -> Result<Self, MeshError> {
        let lines: Vec<usize> = (0..faces.len()).collect();
        Self::build(vertices, normals, faces, &lines)
    }

    fn build(
        vertices: Vec<Vec3<T>>,
        normals: Vec<Vec3<T>>,
        faces: Vec<[u32; 3]>,
        lines: &[usize],
    ) -> Result<Self, MeshError> {
        let mut face_normals = Vec::with_capacity(faces.len());
        for (face, &line) in faces.iter().zip(lines) {
            for &i in face {
                if i as usize >= vertices.len() {
                    return Err(MeshError::IndexOutOfRange {
                        line,
                        index: i as i64 + 1,
                        count: vertices.len(),
                    });
                }
            }
            if face[0] == face[1] || face[0] == face[2] {
                return Err(MeshError::RepeatedVertex {
                    line,
                    index: face[0] as usize + 1,
                });
            }
            if face[1] == face[2] {
                return Err(MeshError::RepeatedVertex {
                    line,
                    index: face[1] as usize + 1,
                });
            }
            let n = face_normal(
                vertices[face[0] as usize],
                vertices[face[1] as usize],
                vertices[face[2] as usize],
            )
            .ok_or(MeshError::DegenerateFace { line })?;
            face_normals.push(n);
        }
        Ok(Mesh {
            vertices,
            normals,
            faces,
            face_normals,
        })
    }

    pub fn vertices(&self) -> &[Vec3<T>] {
        &self.vertices
    }

    pub fn normals(&self) -> &[Vec3<T>] {
        &self.normals
    }

    pub fn faces(&self) -> &[[u32; 3]] {
        &self.faces
    }

    pub fn face_normals(&self) -> &[Vec3<T>] {
        &self.face_normals
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn face_vertices(&self, f: usize) -> [Vec3<T>; 3] {
        let [a, b, c] = self.faces[f];
        [
            self.vertices[a as usize],
            self.vertices[b as usize],
            self.vertices[c as usize],
        ]
    }

    /// Serializes to the supported OBJ subset (`v`, `vn`, `f`).
    pub fn to_obj(&self) -> String {
        use std::fmt::Write;
        let mut out = String::new();
        for v in &self.vertices {
            let _ = writeln!(out, "v {} {} {}", v.x, v.y, v.z);
        }
        for n in &self.normals {
            let _ = writeln!(out, "vn {} {} {}", n.x, n.y, n.z);
        }
        for f in &self.faces {
            let _ = writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
        }
        out
    }
}

/// Unit normal of the triangle `(a, b, c)` with counter-clockwise winding.
pub fn face_normal<T: Scalar>(a: Vec3<T>, b: Vec3<T>, c: Vec3<T>) -> Option<Vec3<T>> {
    (b - a).cross(c - a).normalized()
}

pub fn load_mesh<T: Scalar>(path: impl AsRef<Path>) -> Result<Mesh<T>, MeshError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| MeshError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_obj(&text)
}

pub fn parse_obj<T: Scalar>(text: &str) -> Result<Mesh<T>, MeshError> {
    let mut vertices = Vec::new();
    let mut normals = Vec::new();
    let mut faces = Vec::new();
    let mut face_lines = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        let mut tokens = content.split_whitespace();
        let Some(keyword) = tokens.next() else {
            continue;
        };
        let args: Vec<&str> = tokens.collect();
        match keyword {
            "v" => {
                if args.len() != 3 && args.len() != 4 {
                    return Err(malformed(line, "`v` needs 3 coordinates"));
                }
                vertices.push(parse_vec3(line, &args)?);
            }
            "vn" => {
                if args.len() != 3 {
                    return Err(malformed(line, "`vn` needs 3 components"));
                }
                let n: Vec3<T> = parse_vec3(line, &args)?;
                normals.push(
                    n.normalized()
                        .ok_or_else(|| malformed(line, "zero-length normal"))?,
                );
            }
            "f" => {
                if args.len() < 3 {
                    return Err(malformed(line, "`f` needs 3 vertices"));
                }
                if args.len() != 3 {
                    return Err(MeshError::NonTriangleFace {
                        line,
                        corners: args.len(),
                    });
                }
                let mut face = [0u32; 3];
                for (slot, corner) in face.iter_mut().zip(&args) {
                    *slot = parse_corner(line, corner, vertices.len())?;
                }
                faces.push(face);
                face_lines.push(line);
            }
            "vt" | "vp" | "o" | "g" | "s" | "mtllib" | "usemtl" => {}
            other => {
                return Err(malformed(line, &format!("unsupported keyword `{other}`")));
            }
        }
    }

    Mesh::build(vertices, normals, faces, &face_lines)
}

fn malformed(line: usize, message: &str) -> MeshError {
    MeshError::Malformed {
        line,
        message: message.to_string(),
    }
}

fn parse_vec3<T: Scalar>(line: usize, args: &[&str]) -> Result<Vec3<T>, MeshError> {
    let mut xyz = [T::zero(); 3];
    for (slot, tok) in xyz.iter_mut().zip(args) {
        let v: f64 = tok
            .parse()
            .map_err(|_| malformed(line, &format!("bad number `{tok}`")))?;
        if !v.is_finite() {
            return Err(malformed(line, &format!("non-finite number `{tok}`")));
        }
        *slot = T::lit(v);
    }
    Ok(Vec3::new(xyz[0], xyz[1], xyz[2]))
}

/// Resolves the vertex part of a face corner to a 0-based index.
///
/// Positive indices are range-checked after the whole file is read, since OBJ
/// allows forward references.
fn parse_corner(line: usize, corner: &str, seen: usize) -> Result<u32, MeshError> {
    let vpart = corner.split('/').next().unwrap_or("");
    let index: i64 = vpart
        .parse()
        .map_err(|_| malformed(line, &format!("bad face corner `{corner}`")))?;
    let resolved = match index {
        0 => {
            return Err(MeshError::IndexOutOfRange {
                line,
                index,
                count: seen,
            })
        }
        i if i > 0 => i - 1,
        i => seen as i64 + i,
    };
    if resolved < 0 || resolved > u32::MAX as i64 {
        return Err(MeshError::IndexOutOfRange {
            line,
            index,
            count: seen,
        });
    }
    Ok(resolved as u32)
}

#[cfg(test)]
mod tests {
    use super::*;

    const TRIANGLE: &str = "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n";

    #[test]
    fn single_triangle() {
        let m: Mesh<f64> = parse_obj(TRIANGLE).unwrap();
        assert_eq!(m.vertex_count(), 3);
        assert_eq!(m.face_count(), 1);
        assert_eq!(m.face_normals()[0], Vec3::new(0.0, 0.0, 1.0));
    }

    #[test]
    fn index_out_of_range_reports_line() {
        let err = parse_obj::<f64>("v 0 0 0\nv 1 0 0\nv 0 1 0\n\nf 1 2 7\n").unwrap_err();
        match err {
            MeshError::IndexOutOfRange { line, index, count } => {
                assert_eq!((line, index, count), (5, 7, 3));
            }
            e => panic!("unexpected {e}"),
        }
        assert!(parse_obj::<f64>("v 0 0 0\nf 1 2 7\n")
            .unwrap_err()
            .to_string()
            .contains("out of range"));
    }

    #[test]
    fn quads_are_rejected() {
        let err =
            parse_obj::<f64>("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n").unwrap_err();
        assert!(matches!(
            err,
            MeshError::NonTriangleFace {
                line: 5,
                corners: 4
            }
        ));
    }

    #[test]
    fn corner_forms_and_ignored_statements() {
        let text = "# car\nmtllib car.mtl\no body\nv 0 0 0\nv 1 0 0\nv 0 1 0 1.0\n\
                    vt 0 0\nvn 0 0 2\nusemtl paint\ns off\nf 1/1/1 2//1 -1/3\n";
        let m: Mesh<f64> = parse_obj(text).unwrap();
        assert_eq!(m.faces(), &[[0, 1, 2]]);
        assert_eq!(m.normals(), &[Vec3::new(0.0, 0.0, 1.0)]);
    }

    #[test]
    fn malformed_number_reports_line() {
        let err = parse_obj::<f64>("v 0 0 0\nv 1 zero 0\n").unwrap_err();
        assert!(matches!(err, MeshError::Malformed { line: 2, .. }));
        assert!(err.to_string().starts_with("line 2"));
    }

    #[test]
    fn unknown_keyword_is_malformed() {
        let err = parse_obj::<f64>("v 0 0 0\nl 1 2\n").unwrap_err();
        assert!(matches!(err, MeshError::Malformed { line: 2, .. }));
    }

    #[test]
    fn repeated_and_degenerate_faces() {
        let err = parse_obj::<f64>("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 2\n").unwrap_err();
        assert!(matches!(err, MeshError::RepeatedVertex { line: 4, .. }));
        let err = parse_obj::<f64>("v 0 0 0\nv 1 0 0\nv 2 0 0\nf 1 2 3\n").unwrap_err();
        assert!(matches!(err, MeshError::DegenerateFace { line: 4 }));
    }

    #[test]
    fn missing_file() {
        let err = load_mesh::<f64>("/nonexistent/car.obj").unwrap_err();
        assert!(matches!(err, MeshError::Io { .. }));
    }

    #[test]
    fn obj_roundtrip_preserves_topology() {
        let m: Mesh<f64> = parse_obj(TRIANGLE).unwrap();
        let again: Mesh<f64> = parse_obj(&m.to_obj()).unwrap();
        assert_eq!(m, again);
    }
}

//! PLY reading/writing for oriented point sets and triangle meshes, plus OBJ
//! for meshes. Binary PLY is little-endian; ASCII uses full round-trip
//! precision.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{Point3, Vector3};
use thiserror::Error;

use crate::propagate::{OrientedPoint, OrientedPointSet, Provenance};
use crate::surface::TriangleMesh;

#[derive(Debug, Error)]
pub enum PlyError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: malformed PLY: {msg}")]
    Malformed { path: String, msg: String },
}

fn io_err(path: &Path, source: std::io::Error) -> PlyError {
    PlyError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn malformed(path: &Path, msg: impl Into<String>) -> PlyError {
    PlyError::Malformed {
        path: path.display().to_string(),
        msg: msg.into(),
    }
}

/// Write an oriented point set: xyz + normal as doubles, consistent-view
/// count as uchar, contour confidence and normal spread as floats.
pub fn write_points(path: &Path, set: &OrientedPointSet, binary: bool) -> Result<(), PlyError> {
    let f = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(f);
    let format = if binary {
        "binary_little_endian"
    } else {
        "ascii"
    };
    write!(
        w,
        "ply\nformat {format} 1.0\nelement vertex {}\n\
         property double x\nproperty double y\nproperty double z\n\
         property double nx\nproperty double ny\nproperty double nz\n\
         property uchar views\nproperty float confidence\nproperty float spread\n\
         property uchar seed\nend_header\n",
        set.points.len()
    )
    .map_err(|e| io_err(path, e))?;
    for p in &set.points {
        let views = p.views.min(255) as u8;
        let seed = matches!(p.provenance, Provenance::Seed) as u8;
        if binary {
            for v in [
                p.position.x,
                p.position.y,
                p.position.z,
                p.normal.x,
                p.normal.y,
                p.normal.z,
            ] {
                w.write_all(&v.to_le_bytes()).map_err(|e| io_err(path, e))?;
            }
            w.write_all(&[views]).map_err(|e| io_err(path, e))?;
            w.write_all(&(p.confidence as f32).to_le_bytes())
                .map_err(|e| io_err(path, e))?;
            w.write_all(&(p.spread_deg as f32).to_le_bytes())
                .map_err(|e| io_err(path, e))?;
            w.write_all(&[seed]).map_err(|e| io_err(path, e))?;
        } else {
            writeln!(
                w,
                "{:.17e} {:.17e} {:.17e} {:.17e} {:.17e} {:.17e} {} {:.9e} {:.9e} {}",
                p.position.x,
                p.position.y,
                p.position.z,
                p.normal.x,
                p.normal.y,
                p.normal.z,
                views,
                p.confidence as f32,
                p.spread_deg as f32,
                seed
            )
            .map_err(|e| io_err(path, e))?;
        }
    }
    Ok(())
}

struct PlyHeader {
    binary: bool,
    vertex_count: usize,
    face_count: usize,
    vertex_props: Vec<(String, String)>,
}

fn read_header(path: &Path, r: &mut impl BufRead) -> Result<PlyHeader, PlyError> {
    let mut line = String::new();
    r.read_line(&mut line).map_err(|e| io_err(path, e))?;
    if line.trim() != "ply" {
        return Err(malformed(path, "missing ply magic"));
    }
    let mut binary = false;
    let mut vertex_count = 0;
    let mut face_count = 0;
    let mut vertex_props = Vec::new();
    let mut current = String::new();
    loop {
        line.clear();
        if r.read_line(&mut line).map_err(|e| io_err(path, e))? == 0 {
            return Err(malformed(path, "unexpected EOF in header"));
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.first().copied() {
            Some("format") => {
                binary = match toks.get(1).copied() {
                    Some("ascii") => false,
                    Some("binary_little_endian") => true,
                    other => return Err(malformed(path, format!("unsupported format {other:?}"))),
                };
            }
            Some("comment") => {}
            Some("element") => {
                current = toks[1].to_string();
                let count: usize = toks[2]
                    .parse()
                    .map_err(|_| malformed(path, "bad element count"))?;
                match current.as_str() {
                    "vertex" => vertex_count = count,
                    "face" => face_count = count,
                    _ => {}
                }
            }
            Some("property") => {
                if current == "vertex" && toks.len() == 3 {
                    vertex_props.push((toks[1].to_string(), toks[2].to_string()));
                }
            }
            Some("end_header") => break,
            _ => {}
        }
    }
    Ok(PlyHeader {
        binary,
        vertex_count,
        face_count,
        vertex_props,
    })
}

fn read_scalar(r: &mut impl Read, ty: &str, path: &Path) -> Result<f64, PlyError> {
    let mut buf8 = [0u8; 8];
    let mut buf4 = [0u8; 4];
    let mut buf1 = [0u8; 1];
    Ok(match ty {
        "double" | "float64" => {
            r.read_exact(&mut buf8).map_err(|e| io_err(path, e))?;
            f64::from_le_bytes(buf8)
        }
        "float" | "float32" => {
            r.read_exact(&mut buf4).map_err(|e| io_err(path, e))?;
            f32::from_le_bytes(buf4) as f64
        }
        "uchar" | "uint8" | "char" | "int8" => {
            r.read_exact(&mut buf1).map_err(|e| io_err(path, e))?;
            buf1[0] as f64
        }
        "int" | "int32" | "uint" | "uint32" => {
            r.read_exact(&mut buf4).map_err(|e| io_err(path, e))?;
            i32::from_le_bytes(buf4) as f64
        }
        other => return Err(malformed(path, format!("unsupported property type {other}"))),
    })
}

/// Read an oriented point set written by [`write_points`] (either format).
pub fn read_points(path: &Path) -> Result<OrientedPointSet, PlyError> {
    let f = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = BufReader::new(f);
    let header = read_header(path, &mut r)?;
    let mut set = OrientedPointSet::default();
    let idx_of = |name: &str| header.vertex_props.iter().position(|(_, n)| n == name);
    let required = ["x", "y", "z", "nx", "ny", "nz"];
    for name in required {
        if idx_of(name).is_none() {
            return Err(malformed(path, format!("missing property {name}")));
        }
    }
    let mut values = vec![0.0f64; header.vertex_props.len()];
    for _ in 0..header.vertex_count {
        if header.binary {
            for (i, (ty, _)) in header.vertex_props.iter().enumerate() {
                values[i] = read_scalar(&mut r, ty, path)?;
            }
        } else {
            let mut line = String::new();
            r.read_line(&mut line).map_err(|e| io_err(path, e))?;
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.len() < header.vertex_props.len() {
                return Err(malformed(path, "short vertex line"));
            }
            for (i, t) in toks.iter().take(values.len()).enumerate() {
                values[i] = t
                    .parse()
                    .map_err(|_| malformed(path, format!("bad number {t}")))?;
            }
        }
        let get = |name: &str| idx_of(name).map(|i| values[i]);
        set.points.push(OrientedPoint {
            position: Point3::new(
                get("x").unwrap(),
                get("y").unwrap(),
                get("z").unwrap(),
            ),
            normal: Vector3::new(
                get("nx").unwrap(),
                get("ny").unwrap(),
                get("nz").unwrap(),
            ),
            views: get("views").unwrap_or(0.0) as u32,
            confidence: get("confidence").unwrap_or(0.0),
            spread_deg: get("spread").unwrap_or(f64::NAN),
            provenance: if get("seed").unwrap_or(0.0) > 0.5 {
                Provenance::Seed
            } else {
                Provenance::Propagated
            },
        });
    }
    Ok(set)
}

/// Write a triangle mesh, optionally with extra per-vertex float properties
/// (error or weight visualizations).
pub fn write_mesh(
    path: &Path,
    mesh: &TriangleMesh,
    binary: bool,
    extra: &[(&str, &[f64])],
) -> Result<(), PlyError> {
    for (_, vals) in extra {
        assert_eq!(vals.len(), mesh.vertices.len());
    }
    let f = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(f);
    let format = if binary {
        "binary_little_endian"
    } else {
        "ascii"
    };
    let has_normals = mesh.normals.len() == mesh.vertices.len();
    write!(w, "ply\nformat {format} 1.0\nelement vertex {}\n", mesh.vertices.len())
        .map_err(|e| io_err(path, e))?;
    write!(w, "property double x\nproperty double y\nproperty double z\n")
        .map_err(|e| io_err(path, e))?;
    if has_normals {
        write!(w, "property double nx\nproperty double ny\nproperty double nz\n")
            .map_err(|e| io_err(path, e))?;
    }
    for (name, _) in extra {
        writeln!(w, "property float {name}").map_err(|e| io_err(path, e))?;
    }
    write!(
        w,
        "element face {}\nproperty list uchar int vertex_indices\nend_header\n",
        mesh.triangles.len()
    )
    .map_err(|e| io_err(path, e))?;
    for (i, v) in mesh.vertices.iter().enumerate() {
        let mut scalars = vec![v.x, v.y, v.z];
        if has_normals {
            scalars.extend([mesh.normals[i].x, mesh.normals[i].y, mesh.normals[i].z]);
        }
        if binary {
            for s in &scalars {
                w.write_all(&s.to_le_bytes()).map_err(|e| io_err(path, e))?;
            }
            for (_, vals) in extra {
                w.write_all(&(vals[i] as f32).to_le_bytes())
                    .map_err(|e| io_err(path, e))?;
            }
        } else {
            let mut line = scalars
                .iter()
                .map(|s| format!("{s:.17e}"))
                .collect::<Vec<_>>()
                .join(" ");
            for (_, vals) in extra {
                line.push_str(&format!(" {:.9e}", vals[i] as f32));
            }
            writeln!(w, "{line}").map_err(|e| io_err(path, e))?;
        }
    }
    for t in &mesh.triangles {
        if binary {
            w.write_all(&[3u8]).map_err(|e| io_err(path, e))?;
            for &vi in t {
                w.write_all(&(vi as i32).to_le_bytes())
                    .map_err(|e| io_err(path, e))?;
            }
        } else {
            writeln!(w, "3 {} {} {}", t[0], t[1], t[2]).map_err(|e| io_err(path, e))?;
        }
    }
    Ok(())
}

/// Read a triangle mesh written by [`write_mesh`].
pub fn read_mesh(path: &Path) -> Result<TriangleMesh, PlyError> {
    let f = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = BufReader::new(f);
    let header = read_header(path, &mut r)?;
    let idx_of = |name: &str| header.vertex_props.iter().position(|(_, n)| n == name);
    for name in ["x", "y", "z"] {
        if idx_of(name).is_none() {
            return Err(malformed(path, format!("missing property {name}")));
        }
    }
    let has_normals = idx_of("nx").is_some();
    let mut mesh = TriangleMesh::default();
    let mut values = vec![0.0f64; header.vertex_props.len()];
    for _ in 0..header.vertex_count {
        if header.binary {
            for (i, (ty, _)) in header.vertex_props.iter().enumerate() {
                values[i] = read_scalar(&mut r, ty, path)?;
            }
        } else {
            let mut line = String::new();
            r.read_line(&mut line).map_err(|e| io_err(path, e))?;
            let toks: Vec<&str> = line.split_whitespace().collect();
            for (i, t) in toks.iter().take(values.len()).enumerate() {
                values[i] = t
                    .parse()
                    .map_err(|_| malformed(path, format!("bad number {t}")))?;
            }
        }
        let get = |name: &str| idx_of(name).map(|i| values[i]);
        mesh.vertices.push(Point3::new(
            get("x").unwrap(),
            get("y").unwrap(),
            get("z").unwrap(),
        ));
        if has_normals {
            mesh.normals.push(Vector3::new(
                get("nx").unwrap(),
                get("ny").unwrap(),
                get("nz").unwrap(),
            ));
        }
    }
    for _ in 0..header.face_count {
        if header.binary {
            let mut n = [0u8; 1];
            r.read_exact(&mut n).map_err(|e| io_err(path, e))?;
            let mut idx = Vec::with_capacity(n[0] as usize);
            for _ in 0..n[0] {
                let mut b = [0u8; 4];
                r.read_exact(&mut b).map_err(|e| io_err(path, e))?;
                idx.push(i32::from_le_bytes(b) as usize);
            }
            if idx.len() == 3 {
                mesh.triangles.push([idx[0], idx[1], idx[2]]);
            }
        } else {
            let mut line = String::new();
            r.read_line(&mut line).map_err(|e| io_err(path, e))?;
            let toks: Vec<usize> = line
                .split_whitespace()
                .filter_map(|t| t.parse().ok())
                .collect();
            if toks.len() == 4 && toks[0] == 3 {
                mesh.triangles.push([toks[1], toks[2], toks[3]]);
            }
        }
    }
    Ok(mesh)
}

/// Write a mesh as Wavefront OBJ.
pub fn write_obj(path: &Path, mesh: &TriangleMesh) -> Result<(), PlyError> {
    let f = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(f);
    for v in &mesh.vertices {
        writeln!(w, "v {:.17e} {:.17e} {:.17e}", v.x, v.y, v.z).map_err(|e| io_err(path, e))?;
    }
    let has_normals = mesh.normals.len() == mesh.vertices.len();
    if has_normals {
        for n in &mesh.normals {
            writeln!(w, "vn {:.17e} {:.17e} {:.17e}", n.x, n.y, n.z)
                .map_err(|e| io_err(path, e))?;
        }
    }
    for t in &mesh.triangles {
        if has_normals {
            writeln!(
                w,
                "f {}//{} {}//{} {}//{}",
                t[0] + 1,
                t[0] + 1,
                t[1] + 1,
                t[1] + 1,
                t[2] + 1,
                t[2] + 1
            )
            .map_err(|e| io_err(path, e))?;
        } else {
            writeln!(w, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1)
                .map_err(|e| io_err(path, e))?;
        }
    }
    Ok(())
}

/// Read an OBJ triangle mesh (v/vn/f triangles only).
pub fn read_obj(path: &Path) -> Result<TriangleMesh, PlyError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut mesh = TriangleMesh::default();
    for line in text.lines() {
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.first().copied() {
            Some("v") if toks.len() >= 4 => {
                let p: Vec<f64> = toks[1..4]
                    .iter()
                    .map(|t| t.parse::<f64>())
                    .collect::<Result<_, _>>()
                    .map_err(|_| malformed(path, "bad vertex"))?;
                mesh.vertices.push(Point3::new(p[0], p[1], p[2]));
            }
            Some("vn") if toks.len() >= 4 => {
                let p: Vec<f64> = toks[1..4]
                    .iter()
                    .map(|t| t.parse::<f64>())
                    .collect::<Result<_, _>>()
                    .map_err(|_| malformed(path, "bad normal"))?;
                mesh.normals.push(Vector3::new(p[0], p[1], p[2]));
            }
            Some("f") if toks.len() >= 4 => {
                let mut idx = Vec::new();
                for t in &toks[1..4] {
                    let v = t
                        .split('/')
                        .next()
                        .and_then(|s| s.parse::<usize>().ok())
                        .ok_or_else(|| malformed(path, "bad face"))?;
                    idx.push(v - 1);
                }
                mesh.triangles.push([idx[0], idx[1], idx[2]]);
            }
            _ => {}
        }
    }
    Ok(mesh)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_points() -> OrientedPointSet {
        OrientedPointSet {
            points: (0..17)
                .map(|i| OrientedPoint {
                    position: Point3::new(i as f64 * 0.1, -(i as f64), 0.5),
                    normal: Vector3::new(0.0, 0.6, -0.8),
                    views: 3 + (i % 4) as u32,
                    confidence: 1.5 * i as f64,
                    spread_deg: 0.25,
                    provenance: if i == 0 {
                        Provenance::Seed
                    } else {
                        Provenance::Propagated
                    },
                })
                .collect(),
        }
    }

    #[test]
    fn points_round_trip_both_formats() {
        let dir = std::env::temp_dir().join("mvps_ply_test");
        std::fs::create_dir_all(&dir).unwrap();
        let set = sample_points();
        for (name, binary) in [("pts_a.ply", false), ("pts_b.ply", true)] {
            let path = dir.join(name);
            write_points(&path, &set, binary).unwrap();
            let back = read_points(&path).unwrap();
            assert_eq!(back.points.len(), set.points.len());
            for (a, b) in set.points.iter().zip(back.points.iter()) {
                assert!((a.position - b.position).norm() < 1e-15);
                assert!((a.normal - b.normal).norm() < 1e-15);
                assert_eq!(a.views, b.views);
                assert_eq!(a.provenance, b.provenance);
                assert!((a.confidence - b.confidence).abs() < 1e-6 * (1.0 + a.confidence.abs()));
            }
        }
    }

    #[test]
    fn binary_points_are_deterministic_bytes() {
        let dir = std::env::temp_dir().join("mvps_ply_test");
        std::fs::create_dir_all(&dir).unwrap();
        let set = sample_points();
        let p1 = dir.join("d1.ply");
        let p2 = dir.join("d2.ply");
        write_points(&p1, &set, true).unwrap();
        write_points(&p2, &set, true).unwrap();
        assert_eq!(std::fs::read(p1).unwrap(), std::fs::read(p2).unwrap());
    }

    #[test]
    fn mesh_round_trip_with_extra_property() {
        let dir = std::env::temp_dir().join("mvps_ply_test");
        std::fs::create_dir_all(&dir).unwrap();
        let mut mesh = TriangleMesh {
            vertices: vec![
                Point3::new(0.0, 0.0, 0.0),
                Point3::new(1.0, 0.0, 0.0),
                Point3::new(0.0, 1.0, 0.0),
            ],
            triangles: vec![[0, 1, 2]],
            normals: Vec::new(),
        };
        mesh.recompute_normals();
        let errors = vec![0.1, 0.2, 0.3];
        for (name, binary) in [("m_a.ply", false), ("m_b.ply", true)] {
            let path = dir.join(name);
            write_mesh(&path, &mesh, binary, &[("error", &errors)]).unwrap();
            let back = read_mesh(&path).unwrap();
            assert_eq!(back.vertices.len(), 3);
            assert_eq!(back.triangles, vec![[0, 1, 2]]);
        }
    }

    #[test]
    fn obj_round_trip() {
        let dir = std::env::temp_dir().join("mvps_ply_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("mesh.obj");
        let mut mesh = TriangleMesh {
            vertices: vec![
                Point3::new(0.0, 0.0, 1.0),
                Point3::new(2.0, 0.0, 1.0),
                Point3::new(0.0, 2.0, 1.0),
                Point3::new(2.0, 2.0, 1.0),
            ],
            triangles: vec![[0, 1, 2], [1, 3, 2]],
            normals: Vec::new(),
        };
        mesh.recompute_normals();
        write_obj(&path, &mesh).unwrap();
        let back = read_obj(&path).unwrap();
        assert_eq!(back.vertices.len(), 4);
        assert_eq!(back.triangles.len(), 2);
        assert_eq!(back.normals.len(), 4);
        for (a, b) in mesh.vertices.iter().zip(back.vertices.iter()) {
            assert!((a - b).norm() < 1e-15);
        }
    }
}

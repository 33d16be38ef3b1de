//! Oriented-point fusion and mesh refinement.
//!
//! Points with normals are splatted into a voxel grid as a local signed
//! distance field (Gaussian-weighted mean of `n·(v − p)`), the zero level
//! set is extracted by marching the tetrahedral decomposition of each voxel
//! cell, and the largest connected component is kept. The mesh is then
//! refined by a sparse least-squares fuse of measured positions and normals:
//!
//! `min Σ_v λ‖p_v − p_v⁰‖² + Σ_{(u,v)∈E} (n̄_uv · (p_u − p_v))²`
//!
//! solved by conjugate gradients (the system is SPD for λ > 0).

mod fuse;
mod refine;

pub use fuse::{fuse_points, FuseOptions};
pub use refine::refine;

use nalgebra::{Point3, Vector3};
use thiserror::Error;

use crate::synth::AnalyticShape;

#[derive(Debug, Error)]
pub enum SurfaceError {
    #[error("empty point set")]
    EmptyPoints,
    #[error("voxel size must be positive, got {0}")]
    BadVoxelSize(f64),
    #[error("signed distance field has no zero crossing (all {0})")]
    NoSurface(&'static str),
    #[error("λ must be positive, got {0}")]
    BadLambda(f64),
    #[error("empty mesh")]
    EmptyMesh,
}

/// Indexed triangle mesh with per-vertex normals.
#[derive(Debug, Clone, Default)]
pub struct TriangleMesh {
    pub vertices: Vec<Point3<f64>>,
    pub triangles: Vec<[usize; 3]>,
    pub normals: Vec<Vector3<f64>>,
}

impl TriangleMesh {
    /// Area-weighted per-vertex normals from the triangle winding.
    pub fn recompute_normals(&mut self) {
        let mut acc = vec![Vector3::<f64>::zeros(); self.vertices.len()];
        for t in &self.triangles {
            let a = self.vertices[t[0]];
            let b = self.vertices[t[1]];
            let c = self.vertices[t[2]];
            let n = (b - a).cross(&(c - a));
            for &vi in t {
                acc[vi] += n;
            }
        }
        self.normals = acc
            .into_iter()
            .map(|n| {
                let l = n.norm();
                if l > 1e-20 {
                    n / l
                } else {
                    Vector3::z()
                }
            })
            .collect();
    }

    /// Drop degenerate triangles (repeated indices or area ≤ 1e-12) and
    /// unreferenced vertices.
    pub fn clean(&mut self) {
        self.triangles.retain(|t| {
            if t[0] == t[1] || t[1] == t[2] || t[0] == t[2] {
                return false;
            }
            let a = self.vertices[t[0]];
            let b = self.vertices[t[1]];
            let c = self.vertices[t[2]];
            0.5 * (b - a).cross(&(c - a)).norm() > 1e-12
        });
        let mut used = vec![false; self.vertices.len()];
        for t in &self.triangles {
            for &v in t {
                used[v] = true;
            }
        }
        let mut remap = vec![usize::MAX; self.vertices.len()];
        let mut vertices = Vec::new();
        let mut normals = Vec::new();
        for (i, &u) in used.iter().enumerate() {
            if u {
                remap[i] = vertices.len();
                vertices.push(self.vertices[i]);
                if i < self.normals.len() {
                    normals.push(self.normals[i]);
                }
            }
        }
        for t in self.triangles.iter_mut() {
            for v in t.iter_mut() {
                *v = remap[*v];
            }
        }
        self.vertices = vertices;
        if !normals.is_empty() {
            self.normals = normals;
        }
    }

    /// Keep only the largest edge-connected component (by triangle count).
    pub fn keep_largest_component(&mut self) {
        if self.triangles.is_empty() {
            return;
        }
        let mut parent: Vec<usize> = (0..self.vertices.len()).collect();
        fn find(parent: &mut Vec<usize>, i: usize) -> usize {
            let mut i = i;
            while parent[i] != i {
                parent[i] = parent[parent[i]];
                i = parent[i];
            }
            i
        }
        for t in &self.triangles {
            let a = find(&mut parent, t[0]);
            let b = find(&mut parent, t[1]);
            let c = find(&mut parent, t[2]);
            parent[b] = a;
            parent[c] = a;
        }
        let mut count: std::collections::HashMap<usize, usize> = std::collections::HashMap::new();
        for t in &self.triangles {
            *count.entry(find(&mut parent, t[0])).or_default() += 1;
        }
        let best = count
            .iter()
            .max_by_key(|(root, c)| (**c, usize::MAX - **root))
            .map(|(r, _)| *r)
            .unwrap();
        let mut roots = vec![0usize; self.vertices.len()];
        for i in 0..self.vertices.len() {
            roots[i] = find(&mut parent, i);
        }
        self.triangles.retain(|t| roots[t[0]] == best);
        self.clean();
    }

    pub fn centroid(&self) -> Point3<f64> {
        let mut c = Vector3::zeros();
        for v in &self.vertices {
            c += v.coords;
        }
        Point3::from(c / self.vertices.len().max(1) as f64)
    }
}

/// Summary distance statistics of mesh vertices to a ground-truth surface.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct ShapeErrorStats {
    pub mean: f64,
    pub median: f64,
    pub rms: f64,
    pub max: f64,
}

/// Ground truth surface for error evaluation.
pub enum GtSurface<'a> {
    Analytic(&'a AnalyticShape),
    Mesh(&'a TriangleMesh),
}

/// Per-vertex unsigned distance of mesh vertices to the GT surface plus
/// summary statistics. For the analytic shapes `|F|` is the exact distance.
pub fn shape_error(mesh: &TriangleMesh, gt: &GtSurface) -> Result<(ShapeErrorStats, Vec<f64>), SurfaceError> {
    if mesh.vertices.is_empty() {
        return Err(SurfaceError::EmptyMesh);
    }
    let distances: Vec<f64> = match gt {
        GtSurface::Analytic(shape) => mesh.vertices.iter().map(|v| shape.f(v).abs()).collect(),
        GtSurface::Mesh(gt_mesh) => {
            let index = MeshDistance::build(gt_mesh);
            mesh.vertices.iter().map(|v| index.distance(v)).collect()
        }
    };
    let stats = ShapeErrorStats {
        mean: crate::math::mean(&distances),
        median: crate::math::median(&distances),
        rms: crate::math::rms(&distances),
        max: distances.iter().copied().fold(0.0, f64::max),
    };
    Ok((stats, distances))
}

/// Exact point-to-triangle distance.
pub fn point_triangle_distance(p: &Point3<f64>, a: &Point3<f64>, b: &Point3<f64>, c: &Point3<f64>) -> f64 {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return ap.norm();
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return bp.norm();
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return (ap - ab * v).norm();
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return cp.norm();
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return (ap - ac * w).norm();
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return (bp - (c - b) * w).norm();
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    (p - (a + ab * v + ac * w)).norm()
}

/// Uniform-grid accelerated point-to-mesh distance.
struct MeshDistance<'a> {
    mesh: &'a TriangleMesh,
    cell: f64,
    origin: Point3<f64>,
    dims: [usize; 3],
    bins: Vec<Vec<u32>>,
}

impl<'a> MeshDistance<'a> {
    fn build(mesh: &'a TriangleMesh) -> Self {
        let mut lo = Point3::new(f64::MAX, f64::MAX, f64::MAX);
        let mut hi = Point3::new(f64::MIN, f64::MIN, f64::MIN);
        for v in &mesh.vertices {
            for k in 0..3 {
                lo[k] = lo[k].min(v[k]);
                hi[k] = hi[k].max(v[k]);
            }
        }
        let extent = ((hi - lo).norm()).max(1e-9);
        let cell = extent / (mesh.triangles.len() as f64).cbrt().max(4.0);
        let dims = [
            (((hi.x - lo.x) / cell).ceil() as usize + 1).max(1),
            (((hi.y - lo.y) / cell).ceil() as usize + 1).max(1),
            (((hi.z - lo.z) / cell).ceil() as usize + 1).max(1),
        ];
        let mut bins = vec![Vec::new(); dims[0] * dims[1] * dims[2]];
        for (ti, t) in mesh.triangles.iter().enumerate() {
            let mut tl = Point3::new(f64::MAX, f64::MAX, f64::MAX);
            let mut th = Point3::new(f64::MIN, f64::MIN, f64::MIN);
            for &vi in t {
                let v = mesh.vertices[vi];
                for k in 0..3 {
                    tl[k] = tl[k].min(v[k]);
                    th[k] = th[k].max(v[k]);
                }
            }
            let idx = |p: &Point3<f64>, k: usize| -> usize {
                (((p[k] - lo[k]) / cell).floor() as i64).clamp(0, dims[k] as i64 - 1) as usize
            };
            for z in idx(&tl, 2)..=idx(&th, 2) {
                for y in idx(&tl, 1)..=idx(&th, 1) {
                    for x in idx(&tl, 0)..=idx(&th, 0) {
                        bins[(z * dims[1] + y) * dims[0] + x].push(ti as u32);
                    }
                }
            }
        }
        Self {
            mesh,
            cell,
            origin: lo,
            dims,
            bins,
        }
    }

    fn distance(&self, p: &Point3<f64>) -> f64 {
        let cell_of = |k: usize, v: f64| -> i64 {
            (((v - self.origin[k]) / self.cell).floor() as i64).clamp(0, self.dims[k] as i64 - 1)
        };
        let cx = cell_of(0, p.x);
        let cy = cell_of(1, p.y);
        let cz = cell_of(2, p.z);
        let mut best = f64::MAX;
        let max_ring = *self.dims.iter().max().unwrap() as i64;
        for ring in 0..=max_ring {
            // Once a hit is found, triangles beyond (ring-1) cells cannot beat it.
            if best < (ring - 1).max(0) as f64 * self.cell {
                break;
            }
            for dz in -ring..=ring {
                for dy in -ring..=ring {
                    for dx in -ring..=ring {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != ring {
                            continue;
                        }
                        let (x, y, z) = (cx + dx, cy + dy, cz + dz);
                        if x < 0
                            || y < 0
                            || z < 0
                            || x >= self.dims[0] as i64
                            || y >= self.dims[1] as i64
                            || z >= self.dims[2] as i64
                        {
                            continue;
                        }
                        let bin =
                            &self.bins[((z as usize) * self.dims[1] + y as usize) * self.dims[0] + x as usize];
                        for &ti in bin {
                            let t = self.mesh.triangles[ti as usize];
                            let d = point_triangle_distance(
                                p,
                                &self.mesh.vertices[t[0]],
                                &self.mesh.vertices[t[1]],
                                &self.mesh.vertices[t[2]],
                            );
                            best = best.min(d);
                        }
                    }
                }
            }
        }
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::UnitQuaternion;

    fn unit_sphere_mesh(subdiv: usize) -> TriangleMesh {
        // UV-sphere tessellation.
        let mut mesh = TriangleMesh::default();
        let rows = subdiv;
        let cols = subdiv * 2;
        for r in 0..=rows {
            let phi = std::f64::consts::PI * r as f64 / rows as f64;
            for c in 0..cols {
                let th = std::f64::consts::TAU * c as f64 / cols as f64;
                mesh.vertices.push(Point3::new(
                    phi.sin() * th.cos(),
                    phi.sin() * th.sin(),
                    phi.cos(),
                ));
            }
        }
        let at = |r: usize, c: usize| r * cols + (c % cols);
        for r in 0..rows {
            for c in 0..cols {
                mesh.triangles.push([at(r, c), at(r + 1, c), at(r + 1, c + 1)]);
                mesh.triangles.push([at(r, c), at(r + 1, c + 1), at(r, c + 1)]);
            }
        }
        mesh.clean();
        mesh.recompute_normals();
        mesh
    }

    #[test]
    fn exact_tessellation_has_zero_error() {
        let mesh = unit_sphere_mesh(24);
        let gt = AnalyticShape::sphere(Point3::origin(), 1.0);
        let (stats, _) = shape_error(&mesh, &GtSurface::Analytic(&gt)).unwrap();
        assert!(stats.mean < 1e-9);
        assert!(stats.max < 1e-9);
    }

    #[test]
    fn concentric_spheres_have_radius_gap() {
        let mesh = unit_sphere_mesh(24);
        let gt = AnalyticShape::sphere(Point3::origin(), 1.01);
        let (stats, _) = shape_error(&mesh, &GtSurface::Analytic(&gt)).unwrap();
        assert!((stats.mean - 0.01).abs() < 1e-4, "mean {}", stats.mean);
    }

    #[test]
    fn mesh_distance_matches_brute_force() {
        let gt_mesh = unit_sphere_mesh(12);
        let query = unit_sphere_mesh(7);
        let scaled = TriangleMesh {
            vertices: query
                .vertices
                .iter()
                .map(|v| Point3::from(v.coords * 1.03))
                .collect(),
            triangles: query.triangles.clone(),
            normals: query.normals.clone(),
        };
        let (stats, dists) = shape_error(&scaled, &GtSurface::Mesh(&gt_mesh)).unwrap();
        // Brute force oracle.
        for (vi, v) in scaled.vertices.iter().enumerate().step_by(13) {
            let mut best = f64::MAX;
            for t in &gt_mesh.triangles {
                best = best.min(point_triangle_distance(
                    v,
                    &gt_mesh.vertices[t[0]],
                    &gt_mesh.vertices[t[1]],
                    &gt_mesh.vertices[t[2]],
                ));
            }
            assert!((dists[vi] - best).abs() < 1e-12);
        }
        assert!(stats.mean > 0.0);
    }

    #[test]
    fn empty_mesh_errors() {
        let mesh = TriangleMesh::default();
        let gt = AnalyticShape::sphere(Point3::origin(), 1.0);
        assert!(shape_error(&mesh, &GtSurface::Analytic(&gt)).is_err());
    }

    #[test]
    fn torus_error_scale_check() {
        let gt = AnalyticShape::torus(Point3::origin(), 3.0, 1.0, UnitQuaternion::identity());
        let mesh = unit_sphere_mesh(8);
        let shifted = TriangleMesh {
            vertices: mesh
                .vertices
                .iter()
                .map(|v| Point3::new(v.x + 3.0, v.y, v.z))
                .collect(),
            triangles: mesh.triangles.clone(),
            normals: mesh.normals.clone(),
        };
        // A unit sphere centered on the ring centerline: every vertex is on
        // the tube surface.
        let (stats, _) = shape_error(&shifted, &GtSurface::Analytic(&gt)).unwrap();
        assert!(stats.max < 1e-9);
    }
}

//! Z-buffer rasterizer used for occlusion tests and SVBRDF re-rendering.

use nalgebra::{Point2, Point3, Vector3};

use crate::camera::{CameraModel, Intrinsics};
use crate::img::Grid;
use crate::surface::TriangleMesh;

/// Per-pixel geometry buffers from one viewpoint.
pub struct RasterMap {
    /// Camera-space depth, +inf where empty.
    pub depth: Grid<f64>,
    /// World position.
    pub position: Grid<[f64; 3]>,
    /// Interpolated unit world normal.
    pub normal: Grid<[f64; 3]>,
    /// Barycentric vertex blend: indices and weights.
    pub vertex_blend: Grid<([u32; 3], [f32; 3])>,
}

impl RasterMap {
    pub fn mask(&self) -> Grid<bool> {
        self.depth.map(|d| d.is_finite())
    }
}

/// Rasterize a mesh into depth/position/normal buffers.
pub fn rasterize(mesh: &TriangleMesh, camera: &CameraModel) -> RasterMap {
    let w = camera.width;
    let h = camera.height;
    let mut depth = Grid::from_fill(w, h, f64::INFINITY);
    let mut position = Grid::from_fill(w, h, [f64::NAN; 3]);
    let mut normal = Grid::from_fill(w, h, [f64::NAN; 3]);
    let mut blend = Grid::from_fill(w, h, ([u32::MAX; 3], [0.0f32; 3]));

    let cam_pts: Vec<Point3<f64>> = mesh
        .vertices
        .iter()
        .map(|v| camera.world_to_camera(v))
        .collect();
    let persp = matches!(camera.intrinsics, Intrinsics::Perspective { .. });

    for t in &mesh.triangles {
        let pc = [cam_pts[t[0]], cam_pts[t[1]], cam_pts[t[2]]];
        if persp && pc.iter().any(|p| p.z <= 1e-9) {
            continue;
        }
        let px: Vec<Point2<f64>> = match pc
            .iter()
            .map(|p| camera.project_cam(p))
            .collect::<Result<_, _>>()
        {
            Ok(v) => v,
            Err(_) => continue,
        };
        let min_x = px.iter().map(|p| p.x).fold(f64::MAX, f64::min).floor().max(0.0) as usize;
        let max_x = px.iter().map(|p| p.x).fold(f64::MIN, f64::max).ceil().min((w - 1) as f64) as usize;
        let min_y = px.iter().map(|p| p.y).fold(f64::MAX, f64::min).floor().max(0.0) as usize;
        let max_y = px.iter().map(|p| p.y).fold(f64::MIN, f64::max).ceil().min((h - 1) as f64) as usize;
        if min_x > max_x || min_y > max_y {
            continue;
        }
        let denom = (px[1].x - px[0].x) * (px[2].y - px[0].y)
            - (px[1].y - px[0].y) * (px[2].x - px[0].x);
        if denom.abs() < 1e-12 {
            continue;
        }
        for y in min_y..=max_y {
            for x in min_x..=max_x {
                let qx = x as f64;
                let qy = y as f64;
                let w1 = ((qx - px[0].x) * (px[2].y - px[0].y)
                    - (qy - px[0].y) * (px[2].x - px[0].x))
                    / denom;
                let w2 = ((px[1].x - px[0].x) * (qy - px[0].y)
                    - (px[1].y - px[0].y) * (qx - px[0].x))
                    / denom;
                let w0 = 1.0 - w1 - w2;
                if w0 < -1e-9 || w1 < -1e-9 || w2 < -1e-9 {
                    continue;
                }
                // Perspective-correct interpolation via 1/z weights.
                let (b0, b1, b2, z) = if persp {
                    let iz0 = w0 / pc[0].z;
                    let iz1 = w1 / pc[1].z;
                    let iz2 = w2 / pc[2].z;
                    let izs = iz0 + iz1 + iz2;
                    (iz0 / izs, iz1 / izs, iz2 / izs, 1.0 / izs)
                } else {
                    (w0, w1, w2, w0 * pc[0].z + w1 * pc[1].z + w2 * pc[2].z)
                };
                if z >= depth.get(x, y) {
                    continue;
                }
                depth.set(x, y, z);
                let p = mesh.vertices[t[0]].coords * b0
                    + mesh.vertices[t[1]].coords * b1
                    + mesh.vertices[t[2]].coords * b2;
                position.set(x, y, [p.x, p.y, p.z]);
                let n = if mesh.normals.len() == mesh.vertices.len() {
                    let n = mesh.normals[t[0]] * b0
                        + mesh.normals[t[1]] * b1
                        + mesh.normals[t[2]] * b2;
                    n.normalize()
                } else {
                    let a = mesh.vertices[t[0]];
                    let b = mesh.vertices[t[1]];
                    let c = mesh.vertices[t[2]];
                    (b - a).cross(&(c - a)).normalize()
                };
                normal.set(x, y, [n.x, n.y, n.z]);
                blend.set(
                    x,
                    y,
                    (
                        [t[0] as u32, t[1] as u32, t[2] as u32],
                        [b0 as f32, b1 as f32, b2 as f32],
                    ),
                );
            }
        }
    }
    RasterMap {
        depth,
        position,
        normal,
        vertex_blend: blend,
    }
}

/// True when a world point is unoccluded in the raster (its camera depth is
/// within `tol` of the front surface at its projection).
pub fn visible(raster: &RasterMap, camera: &CameraModel, p: &Point3<f64>, tol: f64) -> bool {
    let Ok(px) = camera.project(p) else {
        return false;
    };
    let xi = px.x.round() as i64;
    let yi = px.y.round() as i64;
    if !raster.depth.in_bounds(xi, yi) {
        return false;
    }
    let front = raster.depth.get(xi as usize, yi as usize);
    if !front.is_finite() {
        return false;
    }
    camera.depth_of(p) <= front + tol
}

/// Vertex normal as a world vector at a raster pixel.
pub fn normal_at(raster: &RasterMap, x: usize, y: usize) -> Option<Vector3<f64>> {
    let n = raster.normal.get(x, y);
    if n[0].is_nan() {
        return None;
    }
    Some(Vector3::new(n[0], n[1], n[2]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Rotation3;

    fn quad_mesh(z: f64) -> TriangleMesh {
        let mut mesh = TriangleMesh {
            vertices: vec![
                Point3::new(-1.0, -1.0, z),
                Point3::new(1.0, -1.0, z),
                Point3::new(1.0, 1.0, z),
                Point3::new(-1.0, 1.0, z),
            ],
            triangles: vec![[0, 1, 2], [0, 2, 3]],
            normals: Vec::new(),
        };
        mesh.recompute_normals();
        mesh
    }

    #[test]
    fn ortho_quad_fills_expected_pixels() {
        let cam = CameraModel::orthographic(
            16.0,
            Point2::new(31.5, 31.5),
            Rotation3::identity(),
            Vector3::zeros(),
            64,
            64,
        );
        let raster = rasterize(&quad_mesh(5.0), &cam);
        assert!((raster.depth.get(32, 32) - 5.0).abs() < 1e-9);
        assert!(!raster.depth.get(1, 1).is_finite());
        let n = normal_at(&raster, 32, 32).unwrap();
        assert!(n.z.abs() > 0.99);
    }

    #[test]
    fn nearer_surface_wins_and_occludes() {
        let cam = CameraModel::orthographic(
            16.0,
            Point2::new(31.5, 31.5),
            Rotation3::identity(),
            Vector3::zeros(),
            64,
            64,
        );
        let near = quad_mesh(3.0);
        let mut both = near.clone();
        let far = quad_mesh(7.0);
        let off = both.vertices.len();
        both.vertices.extend(far.vertices.iter().cloned());
        both.normals.extend(far.normals.iter().cloned());
        for t in &far.triangles {
            both.triangles.push([t[0] + off, t[1] + off, t[2] + off]);
        }
        let raster = rasterize(&both, &cam);
        assert!((raster.depth.get(32, 32) - 3.0).abs() < 1e-9);
        assert!(visible(&raster, &cam, &Point3::new(0.0, 0.0, 3.0), 1e-6));
        assert!(!visible(&raster, &cam, &Point3::new(0.0, 0.0, 7.0), 1e-6));
    }

    #[test]
    fn perspective_depth_is_correct_on_tilted_quad() {
        let cam = CameraModel::perspective(
            64.0,
            64.0,
            Point2::new(31.5, 31.5),
            Rotation3::identity(),
            Vector3::zeros(),
            64,
            64,
        );
        // Tilted quad: z varies with x.
        let mut mesh = TriangleMesh {
            vertices: vec![
                Point3::new(-2.0, -2.0, 3.0),
                Point3::new(2.0, -2.0, 5.0),
                Point3::new(2.0, 2.0, 5.0),
                Point3::new(-2.0, 2.0, 3.0),
            ],
            triangles: vec![[0, 1, 2], [0, 2, 3]],
            normals: Vec::new(),
        };
        mesh.recompute_normals();
        let raster = rasterize(&mesh, &cam);
        // The plane satisfies z = 4 + x/2 ⇒ with pixel u: x/z = (u−cx)/f,
        // z(4 + ... ) — verify against a ray-plane intersection at a few pixels.
        for (x, y) in [(20usize, 31usize), (31, 31), (44, 33)] {
            let d = raster.depth.get(x, y);
            if !d.is_finite() {
                continue;
            }
            let dir = cam.ray_dir_cam(&Point2::new(x as f64, y as f64));
            // plane: z = 4 + x/2 → z − x/2 = 4 → t(dir.z − dir.x/2) = 4.
            let t = 4.0 / (dir.z - dir.x * 0.5);
            let z_true = t * dir.z;
            assert!((d - z_true).abs() < 1e-6, "depth {d} vs {z_true}");
        }
    }
}

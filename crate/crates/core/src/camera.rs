//! Camera models and the perspective-to-orthographic cell subdivision.
//!
//! A perspective view is split into a grid of cells; each cell becomes a
//! virtual camera whose principal axis is the view ray through the cell
//! center, obtained by the minimal rotation taking the parent axis onto that
//! ray. Cell images are produced by a homography warp of the parent image,
//! and downstream azimuth/contour math treats each cell as orthographic.
//!
//! Conventions: camera space is right-handed with +z the principal axis
//! (points in front of the camera have z > 0), pixels have integer centers,
//! and "depth" always means the camera-space z coordinate, not ray length.

use nalgebra::{Matrix3, Point2, Point3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::img::Grid;
use crate::math::minimal_rotation;

#[derive(Debug, Error)]
pub enum CameraError {
    #[error("point is behind the perspective camera (z = {z})")]
    BehindCamera { z: f64 },
    #[error("homography is singular")]
    SingularHomography,
    #[error("camera file {path}: {msg}")]
    Parse { path: String, msg: String },
}

/// Intrinsic kind: orthographic (pixels per scene unit) or perspective
/// (focal lengths in pixels).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Intrinsics {
    Orthographic { scale: f64 },
    Perspective { fx: f64, fy: f64 },
}

/// A posed camera. `rotation`/`translation` map world to camera coordinates:
/// `p_cam = R p_world + t`.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    pub intrinsics: Intrinsics,
    pub principal: Point2<f64>,
    pub rotation: Rotation3<f64>,
    pub translation: Vector3<f64>,
    pub width: usize,
    pub height: usize,
}

impl CameraModel {
    pub fn orthographic(
        scale: f64,
        principal: Point2<f64>,
        rotation: Rotation3<f64>,
        translation: Vector3<f64>,
        width: usize,
        height: usize,
    ) -> Self {
        assert!(scale > 0.0);
        Self {
            intrinsics: Intrinsics::Orthographic { scale },
            principal,
            rotation,
            translation,
            width,
            height,
        }
    }

    pub fn perspective(
        fx: f64,
        fy: f64,
        principal: Point2<f64>,
        rotation: Rotation3<f64>,
        translation: Vector3<f64>,
        width: usize,
        height: usize,
    ) -> Self {
        assert!(fx > 0.0 && fy > 0.0);
        Self {
            intrinsics: Intrinsics::Perspective { fx, fy },
            principal,
            rotation,
            translation,
            width,
            height,
        }
    }

    /// Camera placed at `eye` looking at `target`, with `up` fixing the roll.
    pub fn look_at(mut self, eye: Point3<f64>, target: Point3<f64>, up: Vector3<f64>) -> Self {
        let z = (target - eye).normalize();
        let x = up.cross(&z).normalize();
        let y = z.cross(&x);
        // Rows of R are the camera axes expressed in world coordinates.
        let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        self.rotation = Rotation3::from_matrix_unchecked(r);
        self.translation = -(self.rotation * eye.coords);
        self
    }

    pub fn is_perspective(&self) -> bool {
        matches!(self.intrinsics, Intrinsics::Perspective { .. })
    }

    #[inline]
    pub fn world_to_camera(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    #[inline]
    pub fn camera_to_world(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation.inverse() * (p.coords - self.translation))
    }

    /// Camera center in world coordinates (for orthographic cameras this is
    /// the point of the viewing axis at depth 0).
    pub fn center(&self) -> Point3<f64> {
        Point3::from(-(self.rotation.inverse() * self.translation))
    }

    /// Camera axes in world coordinates: (x, y, z = principal axis).
    pub fn axes_world(&self) -> (Vector3<f64>, Vector3<f64>, Vector3<f64>) {
        let ri = self.rotation.inverse();
        (ri * Vector3::x(), ri * Vector3::y(), ri * Vector3::z())
    }

    /// Project a camera-space point to pixel coordinates.
    pub fn project_cam(&self, p: &Point3<f64>) -> Result<Point2<f64>, CameraError> {
        match self.intrinsics {
            Intrinsics::Orthographic { scale } => Ok(Point2::new(
                scale * p.x + self.principal.x,
                scale * p.y + self.principal.y,
            )),
            Intrinsics::Perspective { fx, fy } => {
                if p.z <= 0.0 {
                    return Err(CameraError::BehindCamera { z: p.z });
                }
                Ok(Point2::new(
                    fx * p.x / p.z + self.principal.x,
                    fy * p.y / p.z + self.principal.y,
                ))
            }
        }
    }

    pub fn project(&self, p_world: &Point3<f64>) -> Result<Point2<f64>, CameraError> {
        self.project_cam(&self.world_to_camera(p_world))
    }

    /// Camera-space depth (coordinate along the principal axis).
    pub fn depth_of(&self, p_world: &Point3<f64>) -> f64 {
        self.world_to_camera(p_world).z
    }

    /// Back-project a pixel at the given camera-space depth (camera frame).
    pub fn backproject_cam(&self, pixel: &Point2<f64>, depth: f64) -> Point3<f64> {
        match self.intrinsics {
            Intrinsics::Orthographic { scale } => Point3::new(
                (pixel.x - self.principal.x) / scale,
                (pixel.y - self.principal.y) / scale,
                depth,
            ),
            Intrinsics::Perspective { fx, fy } => Point3::new(
                (pixel.x - self.principal.x) / fx * depth,
                (pixel.y - self.principal.y) / fy * depth,
                depth,
            ),
        }
    }

    pub fn backproject(&self, pixel: &Point2<f64>, depth: f64) -> Point3<f64> {
        self.camera_to_world(&self.backproject_cam(pixel, depth))
    }

    /// Unit direction (camera frame) of the viewing ray through a pixel,
    /// pointing away from the camera.
    pub fn ray_dir_cam(&self, pixel: &Point2<f64>) -> Vector3<f64> {
        match self.intrinsics {
            Intrinsics::Orthographic { .. } => Vector3::z(),
            Intrinsics::Perspective { fx, fy } => Vector3::new(
                (pixel.x - self.principal.x) / fx,
                (pixel.y - self.principal.y) / fy,
                1.0,
            )
            .normalize(),
        }
    }

    /// Horizontal field of view in degrees (0 for orthographic cameras).
    pub fn fov_deg(&self) -> f64 {
        match self.intrinsics {
            Intrinsics::Orthographic { .. } => 0.0,
            Intrinsics::Perspective { fx, .. } => {
                2.0 * (self.width as f64 / (2.0 * fx)).atan().to_degrees()
            }
        }
    }

    /// Intrinsic matrix (orthographic cameras use the affine scale form).
    pub fn k_matrix(&self) -> Matrix3<f64> {
        match self.intrinsics {
            Intrinsics::Orthographic { scale } => Matrix3::new(
                scale,
                0.0,
                self.principal.x,
                0.0,
                scale,
                self.principal.y,
                0.0,
                0.0,
                1.0,
            ),
            Intrinsics::Perspective { fx, fy } => Matrix3::new(
                fx,
                0.0,
                self.principal.x,
                0.0,
                fy,
                self.principal.y,
                0.0,
                0.0,
                1.0,
            ),
        }
    }
}

/// One orthographic cell of a subdivided perspective view.
#[derive(Debug, Clone)]
pub struct OrthoCell {
    pub view: usize,
    pub row: usize,
    pub col: usize,
    /// Minimal rotation with `rotation * Z = Z'` (parent principal axis onto
    /// the cell's central view ray), expressed in the parent camera frame.
    /// Cell-frame coordinates of a camera-frame point q are `Rᵀ q`.
    pub rotation: Rotation3<f64>,
    /// Homography mapping parent pixels to cell pixels.
    pub homography: Matrix3<f64>,
    pub width: usize,
    pub height: usize,
    pub principal: Point2<f64>,
    /// Orthographic pixels-per-unit used when the cell is treated as an
    /// orthographic camera (perspective scale at the session's mean depth).
    pub ortho_scale: f64,
}

impl OrthoCell {
    /// Map a parent pixel into this cell's pixel coordinates.
    pub fn to_cell(&self, parent: &Point2<f64>) -> Point2<f64> {
        apply_homography(&self.homography, parent)
    }

    /// Map a cell pixel back to parent pixel coordinates.
    pub fn to_parent(&self, cell: &Point2<f64>) -> Point2<f64> {
        let inv = self
            .homography
            .try_inverse()
            .expect("cell homography is invertible by construction");
        apply_homography(&inv, cell)
    }
}

pub fn apply_homography(h: &Matrix3<f64>, p: &Point2<f64>) -> Point2<f64> {
    let v = h * Vector3::new(p.x, p.y, 1.0);
    Point2::new(v.x / v.z, v.y / v.z)
}

/// Subdivide a perspective camera into a `rows × cols` grid of orthographic
/// cells with a fractional overlap margin on each side. `mean_depth` sets the
/// cells' orthographic scale.
pub fn subdivide(
    camera: &CameraModel,
    rows: usize,
    cols: usize,
    margin: f64,
    mean_depth: f64,
    view: usize,
) -> Vec<OrthoCell> {
    assert!(rows >= 1 && cols >= 1);
    let (fx, fy) = match camera.intrinsics {
        Intrinsics::Perspective { fx, fy } => (fx, fy),
        Intrinsics::Orthographic { scale } => (scale, scale),
    };
    let base_w = camera.width as f64 / cols as f64;
    let base_h = camera.height as f64 / rows as f64;
    let cell_w = (base_w * (1.0 + 2.0 * margin)).ceil() as usize;
    let cell_h = (base_h * (1.0 + 2.0 * margin)).ceil() as usize;
    let mut cells = Vec::with_capacity(rows * cols);
    for row in 0..rows {
        for col in 0..cols {
            let cx = (col as f64 + 0.5) * base_w - 0.5;
            let cy = (row as f64 + 0.5) * base_h - 0.5;
            let ray = camera.ray_dir_cam(&Point2::new(cx, cy));
            let rotation = minimal_rotation(&Vector3::z(), &ray);
            let principal = Point2::new((cell_w - 1) as f64 / 2.0, (cell_h - 1) as f64 / 2.0);
            let k_cell = Matrix3::new(
                fx,
                0.0,
                principal.x,
                0.0,
                fy,
                principal.y,
                0.0,
                0.0,
                1.0,
            );
            let k_inv = camera
                .k_matrix()
                .try_inverse()
                .expect("intrinsic matrix is invertible");
            let homography = k_cell * rotation.matrix().transpose() * k_inv;
            cells.push(OrthoCell {
                view,
                row,
                col,
                rotation,
                homography,
                width: cell_w,
                height: cell_h,
                principal,
                ortho_scale: 0.5 * (fx + fy) / mean_depth,
            });
        }
    }
    cells
}

/// A trivial single-cell decomposition used for unsubdivided views so that
/// downstream code has one code path.
pub fn identity_cell(camera: &CameraModel, mean_depth: f64, view: usize) -> OrthoCell {
    let scale = match camera.intrinsics {
        Intrinsics::Orthographic { scale } => scale,
        Intrinsics::Perspective { fx, fy } => 0.5 * (fx + fy) / mean_depth,
    };
    OrthoCell {
        view,
        row: 0,
        col: 0,
        rotation: Rotation3::identity(),
        homography: Matrix3::identity(),
        width: camera.width,
        height: camera.height,
        principal: camera.principal,
        ortho_scale: scale,
    }
}

/// Warp an image through homography `h` (mapping source pixels to target
/// pixels) into a `width × height` target. Pixels that pull from outside the
/// source, or from NaN source pixels, become NaN.
pub fn warp(
    image: &Grid<f32>,
    h: &Matrix3<f64>,
    width: usize,
    height: usize,
) -> Result<Grid<f32>, CameraError> {
    let inv = h.try_inverse().ok_or(CameraError::SingularHomography)?;
    let mut out = Grid::from_fill(width, height, f32::NAN);
    for y in 0..height {
        for x in 0..width {
            let src = apply_homography(&inv, &Point2::new(x as f64, y as f64));
            let v = image.bilinear(src.x, src.y);
            if v.is_finite() {
                out.set(x, y, v as f32);
            }
        }
    }
    Ok(out)
}

/// Warp a boolean mask: a target pixel is valid only when its whole bilinear
/// support is inside the source mask.
pub fn warp_mask(mask: &Grid<bool>, h: &Matrix3<f64>, width: usize, height: usize) -> Grid<bool> {
    let inv = match h.try_inverse() {
        Some(m) => m,
        None => return Grid::from_fill(width, height, false),
    };
    Grid::from_fn(width, height, |x, y| {
        let src = apply_homography(&inv, &Point2::new(x as f64, y as f64));
        let x0 = src.x.floor() as i64;
        let y0 = src.y.floor() as i64;
        [(0, 0), (1, 0), (0, 1), (1, 1)]
            .iter()
            .all(|&(dx, dy)| mask.at(x0 + dx, y0 + dy))
    })
}

/// Serialize cameras to the plain-text `cameras.txt` format: one line per
/// view with id, kind, intrinsics, row-major rotation, translation and image
/// size. Lines starting with '#' are comments.
pub fn write_cameras_txt(path: &std::path::Path, cameras: &[CameraModel]) -> std::io::Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        f,
        "# view_id kind intrinsics.. rotation(9, row-major) translation(3) width height"
    )?;
    for (i, cam) in cameras.iter().enumerate() {
        let r = cam.rotation.matrix();
        let kind = match cam.intrinsics {
            Intrinsics::Orthographic { scale } => format!("orthographic {scale:.17e}"),
            Intrinsics::Perspective { fx, fy } => format!("perspective {fx:.17e} {fy:.17e}"),
        };
        write!(f, "{i} {kind} {:.17e} {:.17e}", cam.principal.x, cam.principal.y)?;
        for row in 0..3 {
            for col in 0..3 {
                write!(f, " {:.17e}", r[(row, col)])?;
            }
        }
        for k in 0..3 {
            write!(f, " {:.17e}", cam.translation[k])?;
        }
        writeln!(f, " {} {}", cam.width, cam.height)?;
    }
    Ok(())
}

pub fn read_cameras_txt(path: &std::path::Path) -> Result<Vec<CameraModel>, CameraError> {
    let text = std::fs::read_to_string(path).map_err(|e| CameraError::Parse {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    let perr = |msg: &str| CameraError::Parse {
        path: path.display().to_string(),
        msg: msg.to_string(),
    };
    let mut cams: Vec<(usize, CameraModel)> = Vec::new();
    for line in text.lines() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        let id: usize = toks[0].parse().map_err(|_| perr("bad view id"))?;
        let kind = toks[1];
        let mut idx = 2;
        let mut next = || -> Result<f64, CameraError> {
            let v = toks
                .get(idx)
                .ok_or_else(|| perr("truncated line"))?
                .parse()
                .map_err(|_| perr("bad number"))?;
            idx += 1;
            Ok(v)
        };
        let intr = match kind {
            "orthographic" => Intrinsics::Orthographic { scale: next()? },
            "perspective" => Intrinsics::Perspective {
                fx: next()?,
                fy: next()?,
            },
            _ => return Err(perr("unknown camera kind")),
        };
        let principal = Point2::new(next()?, next()?);
        let mut r = Matrix3::zeros();
        for row in 0..3 {
            for col in 0..3 {
                r[(row, col)] = next()?;
            }
        }
        let translation = Vector3::new(next()?, next()?, next()?);
        let width = next()? as usize;
        let height = next()? as usize;
        let det = r.determinant();
        if (det - 1.0).abs() > 1e-6 {
            return Err(perr("rotation determinant is not +1"));
        }
        cams.push((
            id,
            CameraModel {
                intrinsics: intr,
                principal,
                rotation: Rotation3::from_matrix_unchecked(r),
                translation,
                width,
                height,
            },
        ));
    }
    cams.sort_by_key(|(id, _)| *id);
    Ok(cams.into_iter().map(|(_, c)| c).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;

    fn ident_ortho() -> CameraModel {
        CameraModel::orthographic(
            1.0,
            Point2::new(32.0, 32.0),
            Rotation3::identity(),
            Vector3::zeros(),
            64,
            64,
        )
    }

    #[test]
    fn ortho_projection_ignores_depth() {
        let cam = ident_ortho();
        for z in [0.1, 5.0, 1e4] {
            let px = cam.project(&Point3::new(3.0, 4.0, z)).unwrap();
            assert!((px - Point2::new(35.0, 36.0)).coords.norm() < 1e-12);
        }
    }

    #[test]
    fn perspective_axis_hits_principal_point() {
        let cam = CameraModel::perspective(
            500.0,
            500.0,
            Point2::new(320.0, 240.0),
            Rotation3::identity(),
            Vector3::zeros(),
            640,
            480,
        );
        let px = cam.project(&Point3::new(0.0, 0.0, 1000.0)).unwrap();
        assert!((px - Point2::new(320.0, 240.0)).coords.norm() < 1e-12);
        assert!(cam.project(&Point3::new(0.0, 0.0, -1.0)).is_err());
    }

    #[test]
    fn project_backproject_round_trip() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let persp = CameraModel::perspective(
            420.0,
            430.0,
            Point2::new(100.0, 90.0),
            Rotation3::identity(),
            Vector3::new(0.1, -0.2, 0.3),
            200,
            180,
        )
        .look_at(
            Point3::new(3.0, -2.0, -10.0),
            Point3::new(0.0, 0.0, 0.0),
            Vector3::new(0.0, 1.0, 0.1),
        );
        let ortho = ident_ortho().look_at(
            Point3::new(-4.0, 1.0, -8.0),
            Point3::new(0.0, 0.5, 0.0),
            Vector3::y(),
        );
        for cam in [persp, ortho] {
            for _ in 0..200 {
                let p = Point3::new(
                    rng.random::<f64>() * 2.0 - 1.0,
                    rng.random::<f64>() * 2.0 - 1.0,
                    rng.random::<f64>() * 2.0 - 1.0,
                );
                let depth = cam.depth_of(&p);
                let px = cam.project(&p).unwrap();
                let back = cam.backproject(&px, depth);
                assert!((back - p).norm() < 1e-9, "round trip failed: {p:?} vs {back:?}");
                let px2 = cam.project(&back).unwrap();
                assert!((px2 - px).coords.norm() < 1e-9);
            }
        }
    }

    #[test]
    fn single_cell_centered_grid_is_identity() {
        let cam = CameraModel::perspective(
            500.0,
            500.0,
            Point2::new(31.5, 31.5),
            Rotation3::identity(),
            Vector3::zeros(),
            64,
            64,
        );
        let cells = subdivide(&cam, 1, 1, 0.0, 100.0, 0);
        assert_eq!(cells.len(), 1);
        assert!(cells[0].rotation.angle() < 1e-12);
    }

    #[test]
    fn cell_rotation_is_minimal_and_correct() {
        let cam = CameraModel::perspective(
            300.0,
            300.0,
            Point2::new(149.5, 149.5),
            Rotation3::identity(),
            Vector3::zeros(),
            300,
            300,
        );
        let cells = subdivide(&cam, 3, 3, 0.1, 400.0, 0);
        assert_eq!(cells.len(), 9);
        for cell in &cells {
            let cx = (cell.col as f64 + 0.5) * 100.0 - 0.5;
            let cy = (cell.row as f64 + 0.5) * 100.0 - 0.5;
            let ray = cam.ray_dir_cam(&Point2::new(cx, cy));
            // R Z = Z'
            assert!((cell.rotation * Vector3::z() - ray).norm() < 1e-12);
            // Rotation axis orthogonal to Z (no in-plane twist): R fixes Z × Z'.
            let cross = Vector3::z().cross(&ray);
            if cross.norm() > 1e-9 {
                let axis = cell.rotation.axis().unwrap().into_inner();
                assert!(axis.dot(&Vector3::z()).abs() < 1e-12);
                assert!((cell.rotation * cross - cross).norm() < 1e-12);
                // Rotation angle equals the angle between Z and Z'.
                let expect = Vector3::z().dot(&ray).clamp(-1.0, 1.0).acos();
                assert!((cell.rotation.angle() - expect).abs() < 1e-12);
            }
            // Cell center maps to the cell principal point.
            let mapped = cell.to_cell(&Point2::new(cx, cy));
            assert!(
                (mapped - cell.principal).coords.norm() < 1e-6,
                "cell center -> {mapped:?}, principal {:?}",
                cell.principal
            );
        }
    }

    #[test]
    fn rodrigues_cross_check_45_degrees() {
        // Ray (1,0,1)/√2 with Z=(0,0,1): rotation of 45° about (0,1,0).
        let ray = Vector3::new(1.0, 0.0, 1.0).normalize();
        let r = minimal_rotation(&Vector3::z(), &ray);
        // Independent Rodrigues formula evaluation.
        let axis = Vector3::new(0.0, -1.0, 0.0); // z × ray direction sign
        let k = Vector3::z().cross(&ray).normalize();
        assert!((k + axis).norm() < 1e-12 || (k - axis).norm() < 1e-12);
        let angle = std::f64::consts::FRAC_PI_4;
        let kx = Matrix3::new(0.0, -k.z, k.y, k.z, 0.0, -k.x, -k.y, k.x, 0.0);
        let rodrigues = Matrix3::identity() + kx * angle.sin() + kx * kx * (1.0 - angle.cos());
        assert!((r.matrix() - rodrigues).norm() < 1e-12);
    }

    #[test]
    fn warp_identity_is_noop_and_round_trip_is_tight() {
        let img = Grid::from_fn(64, 64, |x, y| {
            (0.5 + 0.4 * ((x as f32) * 0.11).sin() * ((y as f32) * 0.07).cos()) as f32
        });
        let out = warp(&img, &Matrix3::identity(), 64, 64).unwrap();
        for y in 0..64 {
            for x in 0..64 {
                assert!((out.get(x, y) - img.get(x, y)).abs() < 1e-6);
            }
        }

        // Warp through a cell homography and back.
        let cam = CameraModel::perspective(
            120.0,
            120.0,
            Point2::new(31.5, 31.5),
            Rotation3::identity(),
            Vector3::zeros(),
            64,
            64,
        );
        let cells = subdivide(&cam, 2, 2, 0.1, 100.0, 0);
        let cell = &cells[1];
        let warped = warp(&img, &cell.homography, cell.width, cell.height).unwrap();
        let inv = cell.homography.try_inverse().unwrap();
        let back = warp(&warped, &inv, 64, 64).unwrap();
        let mut max_d = 0.0f32;
        for y in 8..56 {
            for x in 8..56 {
                if back.get(x, y).is_finite() {
                    max_d = max_d.max((back.get(x, y) - img.get(x, y)).abs());
                }
            }
        }
        assert!(max_d < 1e-3, "round-trip warp error {max_d}");
    }

    #[test]
    fn cameras_txt_round_trip() {
        let dir = std::env::temp_dir().join("mvps_cam_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("cameras.txt");
        let cams = vec![
            ident_ortho().look_at(Point3::new(0.0, 0.0, -5.0), Point3::origin(), Vector3::y()),
            CameraModel::perspective(
                333.0,
                334.0,
                Point2::new(64.0, 48.0),
                Rotation3::identity(),
                Vector3::new(0.5, 0.25, 1.0),
                128,
                96,
            ),
        ];
        write_cameras_txt(&path, &cams).unwrap();
        let back = read_cameras_txt(&path).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in cams.iter().zip(&back) {
            assert_eq!(a.intrinsics, b.intrinsics);
            assert!((a.rotation.matrix() - b.rotation.matrix()).norm() < 1e-15);
            assert!((a.translation - b.translation).norm() < 1e-15);
            assert_eq!((a.width, a.height), (b.width, b.height));
        }
    }
}

//! Ray-cast renderer for the synthetic oracle.
//!
//! One linear-radiometry image per LED; pixel value is
//! `f(n, l, v) · max(n·l, 0) · V(p, light)` with `V` the point-light
//! intensity (emission lobe × inverse-square) or 1 in distant mode.
//! Cast shadows are off by default and Gaussian noise is added in linear
//! radiance, clamped at zero.

use nalgebra::{Point2, Point3, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::camera::{CameraModel, Intrinsics};
use crate::img::Grid;
use crate::lightrig::{LightRig, RigMode};

use super::brdf::SyntheticBrdf;
use super::shape::AnalyticShape;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("light rig has no LEDs")]
    EmptyRig,
    #[error("camera does not see the shape (empty mask)")]
    NothingVisible,
    #[error("non-finite render parameter: {0}")]
    NonFinite(&'static str),
}

#[derive(Debug, Clone, Copy)]
pub struct RenderOptions {
    pub shadows: bool,
    /// Standard deviation of additive Gaussian noise in linear radiance.
    pub noise_sigma: f64,
    pub rng_seed: u64,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            shadows: false,
            noise_sigma: 0.0,
            rng_seed: 0,
        }
    }
}

/// One image per LED, linear radiometry.
pub type ImageStack = Vec<Grid<f32>>;

/// Exact per-pixel ground truth from the analytic geometry.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    /// Camera-space depth (z along the principal axis), NaN outside the mask.
    pub depth: Grid<f64>,
    /// Unit normals in the camera frame.
    pub normal: Grid<[f64; 3]>,
    /// Azimuth `atan2(n_y, n_x) mod π`, NaN where degenerate.
    pub azimuth: Grid<f64>,
    pub mask: Grid<bool>,
}

struct Hit {
    point_world: Point3<f64>,
    normal_world: Vector3<f64>,
    depth: f64,
}

fn cast_pixel(shape: &AnalyticShape, camera: &CameraModel, x: usize, y: usize) -> Option<Hit> {
    let pixel = Point2::new(x as f64, y as f64);
    let center_dist = (shape.center - camera.center()).norm();
    let max_t = 4.0 * (center_dist + shape.diameter());
    let (origin, dir) = match camera.intrinsics {
        Intrinsics::Orthographic { .. } => {
            // Start the parallel ray well before the shape.
            let p0 = camera.backproject(&pixel, 0.0);
            let dir = camera.rotation.inverse() * Vector3::z();
            (p0 - dir * shape.diameter(), dir)
        }
        Intrinsics::Perspective { .. } => {
            let dir = camera.rotation.inverse() * camera.ray_dir_cam(&pixel);
            (camera.center(), dir)
        }
    };
    let p = shape.raycast(&origin, &dir, max_t)?;
    let mut n = shape.normal(&p);
    // Keep the visible side facing the camera.
    if n.dot(&dir) > 0.0 {
        n = -n;
    }
    let depth = camera.depth_of(&p);
    if depth <= 0.0 {
        return None;
    }
    Some(Hit {
        point_world: p,
        normal_world: n,
        depth,
    })
}

/// The closed-form shading value at a surface point for one LED.
/// `light_pos_world`/`light_dir_world` come from the rig in the view's
/// camera frame, converted by the caller.
#[allow(clippy::too_many_arguments)]
pub fn shade(
    shape: &AnalyticShape,
    brdf: &SyntheticBrdf,
    p: &Point3<f64>,
    n: &Vector3<f64>,
    view_dir: &Vector3<f64>,
    light_dir: &Vector3<f64>,
    light_value: f64,
    shadow_ray: Option<(&Point3<f64>, f64)>,
) -> f64 {
    let ndl = n.dot(light_dir);
    if ndl <= 0.0 {
        return 0.0;
    }
    if let Some((light_pos, light_dist)) = shadow_ray {
        let eps = 1e-4 * shape.diameter();
        let origin = p + n * eps;
        let to_light = (light_pos - origin).normalize();
        if let Some(block) = shape.raycast(&origin, &to_light, light_dist - 2.0 * eps) {
            if (block - origin).norm() < light_dist - 2.0 * eps {
                return 0.0;
            }
        }
    }
    brdf.eval(p, n, light_dir, view_dir) * ndl * light_value
}

/// Render a photometric-stereo stack plus exact ground truth.
pub fn render_stack(
    shape: &AnalyticShape,
    brdf: &SyntheticBrdf,
    camera: &CameraModel,
    rig: &LightRig,
    options: &RenderOptions,
) -> Result<(ImageStack, GroundTruth), RenderError> {
    if rig.led_count() == 0 {
        return Err(RenderError::EmptyRig);
    }
    if !options.noise_sigma.is_finite() || options.noise_sigma < 0.0 {
        return Err(RenderError::NonFinite("noise_sigma"));
    }
    if !shape.center.coords.iter().all(|v| v.is_finite()) {
        return Err(RenderError::NonFinite("shape center"));
    }
    let w = camera.width;
    let h = camera.height;
    let leds_cam = rig.led_positions();
    let leds_world: Vec<Point3<f64>> = leds_cam
        .iter()
        .map(|p| camera.camera_to_world(p))
        .collect();
    let nominal_world: Vec<Vector3<f64>> = (0..rig.led_count())
        .map(|i| camera.rotation.inverse() * rig.nominal_direction(i))
        .collect();

    // Ray-cast every pixel once.
    let hits: Vec<Option<Hit>> = (0..h)
        .into_par_iter()
        .flat_map_iter(|y| (0..w).map(move |x| (x, y)))
        .map(|(x, y)| cast_pixel(shape, camera, x, y))
        .collect();

    let mut mask = Grid::from_fill(w, h, false);
    let mut depth = Grid::from_fill(w, h, f64::NAN);
    let mut normal = Grid::from_fill(w, h, [f64::NAN; 3]);
    for y in 0..h {
        for x in 0..w {
            if let Some(hit) = &hits[y * w + x] {
                mask.set(x, y, true);
                depth.set(x, y, hit.depth);
                let nc = camera.rotation * hit.normal_world;
                normal.set(x, y, [nc.x, nc.y, nc.z]);
            }
        }
    }
    if mask.count_true() == 0 {
        return Err(RenderError::NothingVisible);
    }
    let azimuth = super::ground_truth_azimuth(&normal, &mask);

    let mut stack = Vec::with_capacity(rig.led_count());
    for led in 0..rig.led_count() {
        let rows: Vec<Vec<f32>> = (0..h)
            .into_par_iter()
            .map(|y| {
                let mut rng = ChaCha8Rng::seed_from_u64(
                    options
                        .rng_seed
                        .wrapping_mul(0x9e3779b97f4a7c15)
                        .wrapping_add((led * h + y) as u64),
                );
                let normal_dist = rand_distr::Normal::new(0.0, 1.0).unwrap();
                (0..w)
                    .map(|x| {
                        let Some(hit) = &hits[y * w + x] else {
                            return f32::NAN;
                        };
                        let view_dir = match camera.intrinsics {
                            Intrinsics::Orthographic { .. } => {
                                -(camera.rotation.inverse() * Vector3::z())
                            }
                            Intrinsics::Perspective { .. } => {
                                (camera.center() - hit.point_world).normalize()
                            }
                        };
                        let far = 100.0 * (shape.diameter() + 1.0);
                        let (light_dir, light_value, shadow) = match rig.mode {
                            RigMode::DistantDirectional => {
                                let dir = nominal_world[led];
                                let virtual_pos = hit.point_world + dir * far;
                                (dir, 1.0, options.shadows.then_some((virtual_pos, far)))
                            }
                            RigMode::NearPoint => {
                                let lp = leds_world[led];
                                let d = lp - hit.point_world;
                                let dist = d.norm();
                                let p_cam = camera.world_to_camera(&hit.point_world);
                                let v = rig.intensity_at(&leds_cam[led], &p_cam);
                                (d / dist, v, options.shadows.then_some((lp, dist)))
                            }
                        };
                        let mut value = shade(
                            shape,
                            brdf,
                            &hit.point_world,
                            &hit.normal_world,
                            &view_dir,
                            &light_dir,
                            light_value,
                            shadow.as_ref().map(|(lp, d)| (lp, *d)),
                        );
                        if options.noise_sigma > 0.0 {
                            value += options.noise_sigma * rng.sample::<f64, _>(normal_dist);
                            value = value.max(0.0);
                        }
                        value as f32
                    })
                    .collect()
            })
            .collect();
        let mut img = Grid::from_fill(w, h, f32::NAN);
        for (y, row) in rows.into_iter().enumerate() {
            for (x, v) in row.into_iter().enumerate() {
                img.set(x, y, v);
            }
        }
        stack.push(img);
    }
    Ok((
        stack,
        GroundTruth {
            depth,
            normal,
            azimuth,
            mask,
        },
    ))
}

//! LED rig geometry and radiometry.
//!
//! The rig is a set of concentric LED circles rigidly attached to the
//! camera; one angular offset θ₀ per circle fixes every LED position once
//! the radius and count are known. Near-point lights get per-pixel incident
//! directions and a calibrated 3D intensity volume (emission profile ×
//! inverse-square falloff); distant mode reduces every LED to one nominal
//! direction. Observations are resampled onto a view-centered circle of
//! directions before azimuth estimation whenever the raw constellation is
//! not already such a circle.

mod calibrate;
mod delaunay;
mod volume;

pub use calibrate::{calibrate_intensity_volume, calibrate_theta0, BoardCapture, CalibrateError};
pub use delaunay::{triangulate, DelaunayError, DiskInterpolator};
pub use volume::IntensityVolume;

use nalgebra::{Isometry3, Point2, Point3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::CameraModel;
use crate::img::Grid;

#[derive(Debug, Error)]
pub enum RigError {
    #[error("light rig has no LEDs")]
    EmptyRig,
    #[error("LED {led} coincides with the surface point")]
    LedOnSurface { led: usize },
    #[error("intensity volume has {have} LED channels, need {need}")]
    MissingLedChannel { have: usize, need: usize },
    #[error("lights file {path}: {msg}")]
    Parse { path: String, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RigMode {
    DistantDirectional,
    NearPoint,
}

/// One LED circle: `count` LEDs at angles `theta0 + 2πk/count` on a circle
/// of `radius` in the rig plane.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Circle {
    pub radius: f64,
    pub count: usize,
    pub theta0: f64,
}

#[derive(Debug, Clone)]
pub struct LightRig {
    pub mode: RigMode,
    pub circles: Vec<Circle>,
    /// Rig-to-camera transform. Identity puts the circles in the camera
    /// plane (z = 0) centered on the camera.
    pub pose: Isometry3<f64>,
    /// Emission lobe exponent: radiance ∝ cosᵐ of the angle from the rig
    /// axis (+z, toward the scene). 0 = uniform emitter.
    pub emission_exponent: f64,
    /// Depth of the nominal reference point used to turn LED positions into
    /// directions in distant mode.
    pub reference_depth: f64,
    /// Explicit per-LED positions (camera frame), overriding the circle
    /// parameterization when present.
    pub explicit: Option<Vec<Point3<f64>>>,
}

impl LightRig {
    pub fn ring(mode: RigMode, radius: f64, count: usize, theta0: f64, reference_depth: f64) -> Self {
        Self {
            mode,
            circles: vec![Circle {
                radius,
                count,
                theta0,
            }],
            pose: Isometry3::identity(),
            emission_exponent: 0.0,
            reference_depth,
            explicit: None,
        }
    }

    pub fn two_rings(
        mode: RigMode,
        inner: (f64, usize, f64),
        outer: (f64, usize, f64),
        reference_depth: f64,
    ) -> Self {
        Self {
            mode,
            circles: vec![
                Circle {
                    radius: inner.0,
                    count: inner.1,
                    theta0: inner.2,
                },
                Circle {
                    radius: outer.0,
                    count: outer.1,
                    theta0: outer.2,
                },
            ],
            pose: Isometry3::identity(),
            emission_exponent: 0.0,
            reference_depth,
            explicit: None,
        }
    }

    pub fn led_count(&self) -> usize {
        if let Some(e) = &self.explicit {
            e.len()
        } else {
            self.circles.iter().map(|c| c.count).sum()
        }
    }

    /// LED positions in the camera frame. LED `k` of circle `c` sits at
    /// angle `θ₀ + 2πk/count` on its circle, mapped by the rig pose.
    pub fn led_positions(&self) -> Vec<Point3<f64>> {
        if let Some(e) = &self.explicit {
            return e.clone();
        }
        let mut out = Vec::with_capacity(self.led_count());
        for c in &self.circles {
            for k in 0..c.count {
                let a = c.theta0 + std::f64::consts::TAU * k as f64 / c.count as f64;
                let local = Point3::new(c.radius * a.cos(), c.radius * a.sin(), 0.0);
                out.push(self.pose * local);
            }
        }
        out
    }

    /// Circle index of a flat LED index (None for explicit rigs).
    pub fn circle_of(&self, led: usize) -> Option<usize> {
        if self.explicit.is_some() {
            return None;
        }
        let mut base = 0;
        for (ci, c) in self.circles.iter().enumerate() {
            if led < base + c.count {
                return Some(ci);
            }
            base += c.count;
        }
        None
    }

    /// Emission axis in the camera frame (+z of the rig plane).
    pub fn axis(&self) -> Vector3<f64> {
        self.pose.rotation * Vector3::z()
    }

    /// Nominal reference point for distant-mode directions (camera frame).
    pub fn reference_point(&self) -> Point3<f64> {
        Point3::new(0.0, 0.0, self.reference_depth)
    }

    /// Nominal unit direction (camera frame) from the reference point toward
    /// LED `led`; the direction every pixel shares in distant mode.
    pub fn nominal_direction(&self, led: usize) -> Vector3<f64> {
        (self.led_positions()[led] - self.reference_point()).normalize()
    }

    /// Point-light intensity at camera-frame point `p`: emission lobe times
    /// inverse-square falloff. Distant rigs report 1.
    pub fn intensity_at(&self, led_pos: &Point3<f64>, p: &Point3<f64>) -> f64 {
        if self.mode == RigMode::DistantDirectional {
            return 1.0;
        }
        let d = p - led_pos;
        let dist2 = d.norm_squared();
        if dist2 < 1e-24 {
            return 0.0;
        }
        let emission = if self.emission_exponent > 0.0 {
            let c = (d.normalize().dot(&self.axis())).max(0.0);
            c.powf(self.emission_exponent)
        } else {
            1.0
        };
        emission / dist2
    }

    /// True when the rig's LED circles are centered on the camera axis with
    /// the rig plane perpendicular to it, i.e. nominal directions already
    /// form view-centered circles.
    pub fn is_camera_centered(&self) -> bool {
        if self.explicit.is_some() {
            return false;
        }
        let t = self.pose.translation.vector;
        let axis = self.axis();
        t.x.abs() < 1e-9 && t.y.abs() < 1e-9 && (axis - Vector3::z()).norm() < 1e-9
    }
}

/// Unit direction (camera frame) from a pixel's approximate 3D position
/// toward an LED. In distant mode this is the LED's nominal direction,
/// independent of the pixel.
pub fn light_direction_at(
    pixel: &Point2<f64>,
    approx_depth: f64,
    led_pos: &Point3<f64>,
    camera: &CameraModel,
    rig: &LightRig,
    led: usize,
) -> Result<Vector3<f64>, RigError> {
    if rig.mode == RigMode::DistantDirectional {
        return Ok(rig.nominal_direction(led));
    }
    let p = camera.backproject_cam(pixel, approx_depth);
    let d = led_pos - p;
    let n = d.norm();
    if n < 1e-12 {
        return Err(RigError::LedOnSurface { led });
    }
    Ok(d / n)
}

/// Divide every pixel of a per-light stack by the calibrated lighting
/// intensity at its approximate 3D position (constant-depth plane). Pixels
/// with zero calibrated intensity become NaN.
pub fn normalize_stack(
    stack: &[Grid<f32>],
    volume: &IntensityVolume,
    camera: &CameraModel,
    approx_depth: f64,
) -> Result<Vec<Grid<f32>>, RigError> {
    if volume.led_count() < stack.len() {
        return Err(RigError::MissingLedChannel {
            have: volume.led_count(),
            need: stack.len(),
        });
    }
    let mut out = Vec::with_capacity(stack.len());
    for (led, img) in stack.iter().enumerate() {
        let mut g = Grid::from_fill(img.width(), img.height(), f32::NAN);
        for y in 0..img.height() {
            for x in 0..img.width() {
                let p = camera.backproject_cam(&Point2::new(x as f64, y as f64), approx_depth);
                let v = volume.query(led, &p);
                let raw = img.get(x, y);
                if v > 0.0 && raw.is_finite() {
                    g.set(x, y, (raw as f64 / v) as f32);
                }
            }
        }
        out.push(g);
    }
    Ok(out)
}

/// Specification of the virtual view-centered circle used for resampling.
#[derive(Debug, Clone, Copy)]
pub struct CircleSpec {
    /// Elevation from the view axis, radians in (0, π/2).
    pub elevation: f64,
    pub samples: usize,
}

/// Resample per-pixel observations `{local light direction, intensity}` onto
/// a view-centered circle of directions at uniform azimuths. Directions are
/// projected to the unit disk (x, y of the unit vector in the local view
/// frame) and interpolated linearly over a Delaunay triangulation; target
/// azimuths outside the convex hull of the samples are reported missing.
pub fn resample_to_circle(
    observations: &[(Vector3<f64>, f64)],
    spec: &CircleSpec,
) -> Result<crate::azimuth::IntensityProfile, DelaunayError> {
    let points: Vec<[f64; 2]> = observations.iter().map(|(d, _)| [d.x, d.y]).collect();
    let values: Vec<f64> = observations.iter().map(|(_, i)| *i).collect();
    let interp = DiskInterpolator::new(&points)?;
    let r = spec.elevation.sin();
    let mut azimuths = Vec::with_capacity(spec.samples);
    let mut intensities = Vec::with_capacity(spec.samples);
    for j in 0..spec.samples {
        let a = std::f64::consts::TAU * j as f64 / spec.samples as f64;
        azimuths.push(a);
        intensities.push(interp.interpolate(&values, [r * a.cos(), r * a.sin()]));
    }
    Ok(crate::azimuth::IntensityProfile {
        azimuths,
        intensities,
    })
}

/// Median elevation (radians, from the view axis) of a set of local light
/// directions; the default virtual-circle elevation. Directions point from
/// the surface toward the light, so the view axis is -z.
pub fn median_elevation(dirs: &[Vector3<f64>]) -> f64 {
    let elevs: Vec<f64> = dirs
        .iter()
        .map(|d| (d.x * d.x + d.y * d.y).sqrt().atan2(-d.z))
        .collect();
    crate::math::median(&elevs)
}

/// Plain-text `lights.txt` writer.
pub fn write_lights_txt(path: &std::path::Path, rig: &LightRig) -> std::io::Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "# mode, rig pose (rotation row-major + translation), circles")?;
    let mode = match rig.mode {
        RigMode::DistantDirectional => "distant_directional",
        RigMode::NearPoint => "near_point",
    };
    writeln!(f, "mode {mode}")?;
    let r = rig.pose.rotation.to_rotation_matrix();
    write!(f, "pose")?;
    for row in 0..3 {
        for col in 0..3 {
            write!(f, " {:.17e}", r[(row, col)])?;
        }
    }
    let t = rig.pose.translation.vector;
    writeln!(f, " {:.17e} {:.17e} {:.17e}", t.x, t.y, t.z)?;
    writeln!(f, "emission_exponent {:.17e}", rig.emission_exponent)?;
    writeln!(f, "reference_depth {:.17e}", rig.reference_depth)?;
    for c in &rig.circles {
        writeln!(
            f,
            "circle radius={:.17e} count={} theta0={:.17e}",
            c.radius, c.count, c.theta0
        )?;
    }
    if let Some(explicit) = &rig.explicit {
        for (i, p) in explicit.iter().enumerate() {
            writeln!(f, "led {} {:.17e} {:.17e} {:.17e}", i, p.x, p.y, p.z)?;
        }
    }
    Ok(())
}

pub fn read_lights_txt(path: &std::path::Path) -> Result<LightRig, RigError> {
    let text = std::fs::read_to_string(path).map_err(|e| RigError::Parse {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    let perr = |msg: String| RigError::Parse {
        path: path.display().to_string(),
        msg,
    };
    let mut rig = LightRig {
        mode: RigMode::DistantDirectional,
        circles: Vec::new(),
        pose: Isometry3::identity(),
        emission_exponent: 0.0,
        reference_depth: 1.0,
        explicit: None,
    };
    for line in text.lines() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks[0] {
            "mode" => {
                rig.mode = match toks.get(1).copied() {
                    Some("distant_directional") => RigMode::DistantDirectional,
                    Some("near_point") => RigMode::NearPoint,
                    other => return Err(perr(format!("unknown mode {other:?}"))),
                };
            }
            "pose" => {
                if toks.len() != 13 {
                    return Err(perr("pose needs 12 numbers".into()));
                }
                let nums: Vec<f64> = toks[1..]
                    .iter()
                    .map(|t| t.parse::<f64>())
                    .collect::<Result<_, _>>()
                    .map_err(|e| perr(format!("bad pose number: {e}")))?;
                let m = nalgebra::Matrix3::from_row_slice(&nums[0..9]);
                let rot = nalgebra::Rotation3::from_matrix_unchecked(m);
                rig.pose = Isometry3::from_parts(
                    nalgebra::Translation3::new(nums[9], nums[10], nums[11]),
                    nalgebra::UnitQuaternion::from_rotation_matrix(&rot),
                );
            }
            "emission_exponent" => {
                rig.emission_exponent = toks[1]
                    .parse()
                    .map_err(|e| perr(format!("bad emission exponent: {e}")))?;
            }
            "reference_depth" => {
                rig.reference_depth = toks[1]
                    .parse()
                    .map_err(|e| perr(format!("bad reference depth: {e}")))?;
            }
            "circle" => {
                let mut radius = None;
                let mut count = None;
                let mut theta0 = None;
                for t in &toks[1..] {
                    let (k, v) = t
                        .split_once('=')
                        .ok_or_else(|| perr(format!("bad circle field {t}")))?;
                    match k {
                        "radius" => radius = v.parse().ok(),
                        "count" => count = v.parse().ok(),
                        "theta0" => theta0 = v.parse().ok(),
                        _ => return Err(perr(format!("unknown circle field {k}"))),
                    }
                }
                rig.circles.push(Circle {
                    radius: radius.ok_or_else(|| perr("circle missing radius".into()))?,
                    count: count.ok_or_else(|| perr("circle missing count".into()))?,
                    theta0: theta0.ok_or_else(|| perr("circle missing theta0".into()))?,
                });
            }
            "led" => {
                if toks.len() != 5 {
                    return Err(perr("led line needs index + 3 coordinates".into()));
                }
                let xyz: Vec<f64> = toks[2..]
                    .iter()
                    .map(|t| t.parse::<f64>())
                    .collect::<Result<_, _>>()
                    .map_err(|e| perr(format!("bad led coordinate: {e}")))?;
                rig.explicit
                    .get_or_insert_with(Vec::new)
                    .push(Point3::new(xyz[0], xyz[1], xyz[2]));
            }
            other => return Err(perr(format!("unknown directive {other}"))),
        }
    }
    if rig.led_count() == 0 {
        return Err(RigError::EmptyRig);
    }
    Ok(rig)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;

    #[test]
    fn four_leds_at_cardinal_angles() {
        let rig = LightRig::ring(RigMode::NearPoint, 300.0, 4, 0.0, 400.0);
        let pos = rig.led_positions();
        assert_eq!(pos.len(), 4);
        assert!((pos[0] - Point3::new(300.0, 0.0, 0.0)).norm() < 1e-9);
        assert!((pos[1] - Point3::new(0.0, 300.0, 0.0)).norm() < 1e-9);
        assert!((pos[2] - Point3::new(-300.0, 0.0, 0.0)).norm() < 1e-9);
        assert!((pos[3] - Point3::new(0.0, -300.0, 0.0)).norm() < 1e-9);
    }

    #[test]
    fn theta0_offsets_first_led() {
        let t0 = 10.0f64.to_radians();
        let rig = LightRig::ring(RigMode::NearPoint, 100.0, 8, t0, 400.0);
        let p = rig.led_positions()[0];
        let angle = p.y.atan2(p.x);
        assert!((angle - t0).abs() < 1e-12);
    }

    #[test]
    fn led_positions_lie_on_circles() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let mut rig = LightRig::two_rings(
                RigMode::NearPoint,
                (50.0 + rng.random::<f64>() * 100.0, 5 + rng.random_range(0..9), rng.random::<f64>()),
                (200.0 + rng.random::<f64>() * 100.0, 5 + rng.random_range(0..9), rng.random::<f64>()),
                400.0,
            );
            rig.pose = Isometry3::from_parts(
                nalgebra::Translation3::new(
                    rng.random::<f64>() - 0.5,
                    rng.random::<f64>() - 0.5,
                    rng.random::<f64>() - 0.5,
                ),
                nalgebra::UnitQuaternion::from_euler_angles(
                    0.2 * rng.random::<f64>(),
                    0.2 * rng.random::<f64>(),
                    0.2 * rng.random::<f64>(),
                ),
            );
            let pos = rig.led_positions();
            let mut flat = 0;
            for c in &rig.circles {
                let center = rig.pose * Point3::origin();
                for _ in 0..c.count {
                    let d = (pos[flat] - center).norm();
                    assert!((d - c.radius).abs() < 1e-9);
                    flat += 1;
                }
            }
        }
    }

    #[test]
    fn theta0_periodicity() {
        let a = LightRig::ring(RigMode::NearPoint, 100.0, 6, 0.3, 400.0);
        let b = LightRig::ring(RigMode::NearPoint, 100.0, 6, 0.3 + std::f64::consts::TAU, 400.0);
        for (pa, pb) in a.led_positions().iter().zip(b.led_positions().iter()) {
            assert!((pa - pb).norm() < 1e-9);
        }
    }

    #[test]
    fn axial_led_direction() {
        // LED on the principal axis at depth 0, pixel on axis at depth d.
        let mut rig = LightRig::ring(RigMode::NearPoint, 100.0, 5, 0.0, 400.0);
        rig.explicit = Some(vec![Point3::new(0.0, 0.0, 0.0)]);
        let cam = CameraModel::orthographic(
            1.0,
            Point2::new(32.0, 32.0),
            nalgebra::Rotation3::identity(),
            Vector3::zeros(),
            64,
            64,
        );
        let d = light_direction_at(&Point2::new(32.0, 32.0), 250.0, &rig.led_positions()[0], &cam, &rig, 0)
            .unwrap();
        assert!((d - Vector3::new(0.0, 0.0, -1.0)).norm() < 1e-12);
    }

    #[test]
    fn distant_mode_directions_are_pixel_independent() {
        let rig = LightRig::ring(RigMode::DistantDirectional, 300.0, 8, 0.1, 400.0);
        let cam = CameraModel::orthographic(
            1.0,
            Point2::new(32.0, 32.0),
            nalgebra::Rotation3::identity(),
            Vector3::zeros(),
            64,
            64,
        );
        let leds = rig.led_positions();
        let d1 = light_direction_at(&Point2::new(0.0, 0.0), 100.0, &leds[3], &cam, &rig, 3).unwrap();
        let d2 = light_direction_at(&Point2::new(63.0, 63.0), 900.0, &leds[3], &cam, &rig, 3).unwrap();
        assert!((d1 - d2).norm() < 1e-15);
    }

    #[test]
    fn near_mode_direction_angle_is_analytic() {
        let mut rig = LightRig::ring(RigMode::NearPoint, 100.0, 5, 0.0, 400.0);
        rig.explicit = Some(vec![Point3::new(0.0, 0.0, 0.0)]);
        let cam = CameraModel::orthographic(
            1.0,
            Point2::new(0.0, 0.0),
            nalgebra::Rotation3::identity(),
            Vector3::zeros(),
            400,
            400,
        );
        let led = rig.led_positions()[0];
        // Two pixels 200 units apart at depth 400, LED at the camera origin.
        let a = light_direction_at(&Point2::new(0.0, 0.0), 400.0, &led, &cam, &rig, 0).unwrap();
        let b = light_direction_at(&Point2::new(200.0, 0.0), 400.0, &led, &cam, &rig, 0).unwrap();
        let angle = a.dot(&b).clamp(-1.0, 1.0).acos();
        let expect = (200.0f64 / 400.0).atan(); // angle subtended at the LED
        assert!((angle - expect).abs() < 1e-9, "{angle} vs {expect}");
    }

    #[test]
    fn lights_txt_round_trip() {
        let dir = std::env::temp_dir().join("mvps_rig_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("lights.txt");
        let mut rig = LightRig::two_rings(
            RigMode::NearPoint,
            (75.0, 16, 0.1),
            (150.0, 16, 0.05),
            400.0,
        );
        rig.emission_exponent = 2.0;
        write_lights_txt(&path, &rig).unwrap();
        let back = read_lights_txt(&path).unwrap();
        assert_eq!(back.mode, RigMode::NearPoint);
        assert_eq!(back.circles.len(), 2);
        assert_eq!(back.led_count(), 32);
        for (a, b) in rig.led_positions().iter().zip(back.led_positions().iter()) {
            assert!((a - b).norm() < 1e-12);
        }
    }
}

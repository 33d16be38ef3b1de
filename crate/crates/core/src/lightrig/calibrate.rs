//! Rig calibration from diffuse-board captures.
//!
//! θ₀: a slanted unit-albedo board with known pose is lit by each LED of a
//! circle in turn; the azimuth estimated from the intensity profile with
//! nominal labels `2πk/count` is `α − θ₀` (α the board normal's true
//! azimuth), so θ₀ follows by subtraction, disambiguated mod 2π by the
//! profile peak and averaged over pixels and boards.
//!
//! Intensity volume: boards roughly parallel to the image plane at several
//! depths sample `V = I/(n·l)` at known 3D positions; the samples are
//! splatted into a per-LED trilinear grid.

use nalgebra::{Point2, Point3, Vector3};
use thiserror::Error;

use crate::azimuth::{estimate_azimuth, fit_fourier, IntensityProfile};
use crate::camera::CameraModel;
use crate::img::Grid;
use crate::math::fold_mod_pi;

use super::{IntensityVolume, LightRig};

#[derive(Debug, Error)]
pub enum CalibrateError {
    #[error("board {board} is fronto-parallel; its normal azimuth is undefined")]
    FrontoParallelBoard { board: usize },
    #[error("circle {circle} has {count} LEDs; calibration needs at least 5")]
    TooFewLeds { circle: usize, count: usize },
    #[error("no usable calibration samples (all grazing or outside the boards)")]
    NoSamples,
    #[error("azimuth estimation failed on board {board}: {msg}")]
    Estimation { board: usize, msg: String },
}

/// One diffuse-board capture: per-LED images of a plane with known pose,
/// everything in the camera frame of `camera`.
#[derive(Debug, Clone)]
pub struct BoardCapture {
    pub camera: CameraModel,
    pub plane_point: Point3<f64>,
    /// Unit normal facing the camera (z component negative).
    pub plane_normal: Vector3<f64>,
    pub images: Vec<Grid<f32>>,
    /// Pixel sampling stride.
    pub stride: usize,
}

impl BoardCapture {
    /// Intersection of the viewing ray through `pixel` with the board plane
    /// (camera frame). None when the ray is parallel to the board.
    fn board_point(&self, pixel: &Point2<f64>) -> Option<Point3<f64>> {
        let dir = self.camera.ray_dir_cam(pixel);
        let origin = match self.camera.intrinsics {
            crate::camera::Intrinsics::Orthographic { .. } => {
                self.camera.backproject_cam(pixel, 0.0)
            }
            crate::camera::Intrinsics::Perspective { .. } => Point3::origin(),
        };
        let denom = self.plane_normal.dot(&dir);
        if denom.abs() < 1e-12 {
            return None;
        }
        let t = self.plane_normal.dot(&(self.plane_point - origin)) / denom;
        if t <= 0.0 {
            return None;
        }
        Some(origin + dir * t)
    }
}

#[derive(Debug, Clone)]
pub struct Theta0Calibration {
    /// Calibrated θ₀ per circle, folded into [0, 2π).
    pub per_circle: Vec<f64>,
    /// Per-board estimates (board-major, then circle) for consistency checks.
    pub per_board: Vec<Vec<f64>>,
}

/// Calibrate θ₀ of every circle from slanted-board captures.
pub fn calibrate_theta0(
    captures: &[BoardCapture],
    rig: &LightRig,
) -> Result<Theta0Calibration, CalibrateError> {
    for (ci, c) in rig.circles.iter().enumerate() {
        if c.count < 5 {
            return Err(CalibrateError::TooFewLeds {
                circle: ci,
                count: c.count,
            });
        }
    }
    let mut per_board: Vec<Vec<f64>> = Vec::new();
    for (bi, cap) in captures.iter().enumerate() {
        let n = cap.plane_normal;
        if n.x * n.x + n.y * n.y < 1e-12 {
            return Err(CalibrateError::FrontoParallelBoard { board: bi });
        }
        let alpha = n.y.atan2(n.x);
        let mut per_circle = Vec::new();
        let mut led_base = 0;
        for (ci, circle) in rig.circles.iter().enumerate() {
            let mut sin_sum = 0.0;
            let mut cos_sum = 0.0;
            let mut count = 0usize;
            let stride = cap.stride.max(1);
            let mut y = stride / 2;
            while y < cap.camera.height {
                let mut x = stride / 2;
                while x < cap.camera.width {
                    let pixel = Point2::new(x as f64, y as f64);
                    if cap.board_point(&pixel).is_none() {
                        x += stride;
                        continue;
                    }
                    let azimuths: Vec<f64> = (0..circle.count)
                        .map(|k| std::f64::consts::TAU * k as f64 / circle.count as f64)
                        .collect();
                    let intensities: Vec<Option<f64>> = (0..circle.count)
                        .map(|k| {
                            let v = cap.images[led_base + k].get(x, y);
                            if v.is_finite() && v > 0.0 {
                                Some(v as f64)
                            } else {
                                None
                            }
                        })
                        .collect();
                    let profile = IntensityProfile {
                        azimuths,
                        intensities,
                    };
                    if let Ok(series) = fit_fourier(&profile, 2) {
                        if let Some(est) = estimate_azimuth(&series, 1e-4) {
                            // θ̂ = α − θ₀ (mod π); pick the mod-2π branch whose
                            // predicted profile peak matches the fitted one.
                            let base = fold_mod_pi(alpha - est.theta);
                            let peak = series.argmax_dense(720);
                            let mut best = base;
                            let mut best_err = f64::MAX;
                            for cand in [base, base + std::f64::consts::PI] {
                                let predicted_peak = alpha - cand;
                                let err = circ_dist_2pi(predicted_peak, peak);
                                if err < best_err {
                                    best_err = err;
                                    best = cand;
                                }
                            }
                            sin_sum += best.sin();
                            cos_sum += best.cos();
                            count += 1;
                        }
                    }
                    x += stride;
                }
                y += stride;
            }
            if count == 0 {
                return Err(CalibrateError::Estimation {
                    board: bi,
                    msg: format!("no pixel produced an estimate for circle {ci}"),
                });
            }
            let mut theta0 = sin_sum.atan2(cos_sum);
            if theta0 < 0.0 {
                theta0 += std::f64::consts::TAU;
            }
            per_circle.push(theta0);
            led_base += circle.count;
        }
        per_board.push(per_circle);
    }
    if per_board.is_empty() {
        return Err(CalibrateError::NoSamples);
    }
    // Circular mean across boards.
    let circles = per_board[0].len();
    let mut per_circle = Vec::with_capacity(circles);
    for ci in 0..circles {
        let mut s = 0.0;
        let mut c = 0.0;
        for b in &per_board {
            s += b[ci].sin();
            c += b[ci].cos();
        }
        let mut t = s.atan2(c);
        if t < 0.0 {
            t += std::f64::consts::TAU;
        }
        per_circle.push(t);
    }
    Ok(Theta0Calibration {
        per_circle,
        per_board,
    })
}

fn circ_dist_2pi(a: f64, b: f64) -> f64 {
    let mut d = (a - b) % std::f64::consts::TAU;
    if d < 0.0 {
        d += std::f64::consts::TAU;
    }
    d.min(std::f64::consts::TAU - d)
}

/// Calibrate the lighting intensity volume from unit-albedo Lambertian board
/// captures at multiple depths. Samples with `n·l ≤ 0.05` are discarded as
/// grazing.
pub fn calibrate_intensity_volume(
    captures: &[BoardCapture],
    rig: &LightRig,
    resolution: (usize, usize, usize),
) -> Result<IntensityVolume, CalibrateError> {
    let leds = rig.led_positions();
    let mut per_led: Vec<Vec<(Point3<f64>, f64, f64)>> = vec![Vec::new(); leds.len()];
    let mut lo = Point3::new(f64::MAX, f64::MAX, f64::MAX);
    let mut hi = Point3::new(f64::MIN, f64::MIN, f64::MIN);
    for cap in captures {
        let stride = cap.stride.max(1);
        let mut y = stride / 2;
        while y < cap.camera.height {
            let mut x = stride / 2;
            while x < cap.camera.width {
                let pixel = Point2::new(x as f64, y as f64);
                if let Some(p) = cap.board_point(&pixel) {
                    for (li, led) in leds.iter().enumerate() {
                        let l = (led - p).normalize();
                        let ndl = cap.plane_normal.dot(&l);
                        if ndl <= 0.05 {
                            continue;
                        }
                        let i = cap.images[li].get(x, y);
                        if !i.is_finite() || i < 0.0 {
                            continue;
                        }
                        per_led[li].push((p, i as f64 / ndl, 1.0));
                        for k in 0..3 {
                            lo[k] = lo[k].min(p[k]);
                            hi[k] = hi[k].max(p[k]);
                        }
                    }
                }
                x += stride;
            }
            y += stride;
        }
    }
    if per_led.iter().all(|s| s.is_empty()) {
        return Err(CalibrateError::NoSamples);
    }
    // Pad the bounds slightly so boundary samples interpolate cleanly.
    for k in 0..3 {
        let pad = 1e-3 * (hi[k] - lo[k]).abs().max(1e-9);
        lo[k] -= pad;
        hi[k] += pad;
    }
    let mut vol = IntensityVolume::new(lo, hi, resolution, leds.len());
    for (li, samples) in per_led.iter().enumerate() {
        vol.splat(li, samples);
    }
    Ok(vol)
}

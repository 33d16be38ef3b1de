//! Capture-session I/O.
//!
//! A session directory holds `cameras.txt`, `lights.txt`, one folder per
//! view with per-light images (PFM canonical, 8/16-bit PNG accepted with a
//! declared gamma), optional masks, optional per-view light directions and
//! intensities (DiLiGenT-style), an optional calibrated intensity volume,
//! optional seeds and optional synthetic ground truth.

use std::path::{Path, PathBuf};

use nalgebra::{Point3, Vector3};
use thiserror::Error;

use crate::camera::CameraModel;
use crate::img::Grid;
use crate::io::pfm;
use crate::lightrig::{IntensityVolume, LightRig};

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("session directory {0} does not contain cameras.txt")]
    MissingCameras(String),
    #[error("session directory {0} does not contain lights.txt")]
    MissingLights(String),
    #[error("view {view}: expected {expected} lights, found {found}")]
    InconsistentLightCount {
        view: usize,
        expected: usize,
        found: usize,
    },
    #[error("view {view}: image {path} has size {got:?}, expected {expected:?}")]
    MismatchedImageSize {
        view: usize,
        path: String,
        got: (usize, usize),
        expected: (usize, usize),
    },
    #[error("cannot read {path}: {msg}")]
    Unreadable { path: String, msg: String },
    #[error("near-point session without calibration: no intensity_volume.bin and normalization enabled")]
    MissingCalibration,
    #[error(transparent)]
    Camera(#[from] crate::camera::CameraError),
    #[error(transparent)]
    Rig(#[from] crate::lightrig::RigError),
    #[error(transparent)]
    Pfm(#[from] pfm::PfmError),
}

/// One viewpoint: camera, per-light images, validity mask, median image and
/// optional per-view explicit light data.
#[derive(Debug, Clone)]
pub struct View {
    pub camera: CameraModel,
    pub images: Vec<Grid<f32>>,
    pub mask: Grid<bool>,
    pub median: Grid<f32>,
    /// Per-view light directions in the camera frame (DiLiGenT-style
    /// sessions); None when the rig geometry applies.
    pub light_dirs: Option<Vec<Vector3<f64>>>,
    pub light_intensities: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct CaptureSession {
    pub views: Vec<View>,
    pub rig: LightRig,
    pub volume: Option<IntensityVolume>,
    pub units_per_mm: f64,
}

impl CaptureSession {
    pub fn light_count(&self) -> usize {
        self.views.first().map(|v| v.images.len()).unwrap_or(0)
    }
}

/// Per-pixel median across the lights of a stack (mean of the two middle
/// values for even counts).
pub fn median_image(stack: &[Grid<f32>]) -> Grid<f32> {
    assert!(!stack.is_empty(), "median of an empty stack");
    let w = stack[0].width();
    let h = stack[0].height();
    Grid::from_fn(w, h, |x, y| {
        let mut vals: Vec<f32> = stack.iter().map(|img| img.get(x, y)).collect();
        if vals.iter().any(|v| v.is_nan()) {
            return f32::NAN;
        }
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = vals.len();
        if n % 2 == 1 {
            vals[n / 2]
        } else {
            0.5 * (vals[n / 2 - 1] + vals[n / 2])
        }
    })
}

fn srgb_decode(v: f32) -> f32 {
    if v <= 0.04045 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

/// Load a single-channel image: PFM as-is, PNG scaled to [0, 1] with the
/// declared gamma decode.
pub fn load_image(path: &Path, srgb: bool) -> Result<Grid<f32>, SessionError> {
    let unreadable = |msg: String| SessionError::Unreadable {
        path: path.display().to_string(),
        msg,
    };
    match path.extension().and_then(|e| e.to_str()) {
        Some("pfm") => Ok(pfm::read_gray(path)?),
        Some("png") => {
            let file = std::fs::File::open(path).map_err(|e| unreadable(e.to_string()))?;
            let decoder = png::Decoder::new(std::io::BufReader::new(file));
            let mut reader = decoder.read_info().map_err(|e| unreadable(e.to_string()))?;
            let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
            let info = reader
                .next_frame(&mut buf)
                .map_err(|e| unreadable(e.to_string()))?;
            let w = info.width as usize;
            let h = info.height as usize;
            let channels = info.color_type.samples();
            let mut grid = Grid::from_fill(w, h, 0.0f32);
            for y in 0..h {
                for x in 0..w {
                    let v = match info.bit_depth {
                        png::BitDepth::Eight => {
                            let o = (y * w + x) * channels;
                            let mut acc = 0.0f32;
                            let used = channels.min(3);
                            for c in 0..used {
                                acc += buf[o + c] as f32 / 255.0;
                            }
                            acc / used as f32
                        }
                        png::BitDepth::Sixteen => {
                            let o = (y * w + x) * channels * 2;
                            let mut acc = 0.0f32;
                            let used = channels.min(3);
                            for c in 0..used {
                                let hi = buf[o + 2 * c] as u16;
                                let lo = buf[o + 2 * c + 1] as u16;
                                acc += ((hi << 8) | lo) as f32 / 65535.0;
                            }
                            acc / used as f32
                        }
                        other => {
                            return Err(unreadable(format!("unsupported PNG bit depth {other:?}")))
                        }
                    };
                    grid.set(x, y, if srgb { srgb_decode(v) } else { v });
                }
            }
            Ok(grid)
        }
        other => Err(unreadable(format!("unsupported image extension {other:?}"))),
    }
}

fn view_dir_name(index: usize) -> String {
    format!("view_{index:03}")
}

/// Load a session directory.
pub fn load_session(dir: &Path, srgb: bool) -> Result<CaptureSession, SessionError> {
    let cameras_path = dir.join("cameras.txt");
    if !cameras_path.exists() {
        return Err(SessionError::MissingCameras(dir.display().to_string()));
    }
    let lights_path = dir.join("lights.txt");
    if !lights_path.exists() {
        return Err(SessionError::MissingLights(dir.display().to_string()));
    }
    let cameras = crate::camera::read_cameras_txt(&cameras_path)?;
    let rig = crate::lightrig::read_lights_txt(&lights_path)?;
    let volume = {
        let p = dir.join("intensity_volume.bin");
        if p.exists() {
            Some(
                IntensityVolume::read(&p).map_err(|e| SessionError::Unreadable {
                    path: p.display().to_string(),
                    msg: e.to_string(),
                })?,
            )
        } else {
            None
        }
    };
    let units_per_mm = {
        let p = dir.join("session.toml");
        if p.exists() {
            let text = std::fs::read_to_string(&p).map_err(|e| SessionError::Unreadable {
                path: p.display().to_string(),
                msg: e.to_string(),
            })?;
            let table: toml::Value =
                text.parse().map_err(|e: toml::de::Error| SessionError::Unreadable {
                    path: p.display().to_string(),
                    msg: e.to_string(),
                })?;
            table
                .get("units_per_mm")
                .and_then(|v| v.as_float())
                .unwrap_or(1.0)
        } else {
            1.0
        }
    };

    let mut views = Vec::with_capacity(cameras.len());
    let mut expected_lights: Option<usize> = None;
    for (vi, camera) in cameras.into_iter().enumerate() {
        let vdir = dir.join(view_dir_name(vi));
        // Per-light images: light_###.pfm or light_###.png.
        let mut images = Vec::new();
        let mut li = 0usize;
        loop {
            let pfm_path = vdir.join(format!("light_{li:03}.pfm"));
            let png_path = vdir.join(format!("light_{li:03}.png"));
            let path = if pfm_path.exists() {
                pfm_path
            } else if png_path.exists() {
                png_path
            } else {
                break;
            };
            let img = load_image(&path, srgb)?;
            if (img.width(), img.height()) != (camera.width, camera.height) {
                return Err(SessionError::MismatchedImageSize {
                    view: vi,
                    path: path.display().to_string(),
                    got: (img.width(), img.height()),
                    expected: (camera.width, camera.height),
                });
            }
            images.push(img);
            li += 1;
        }
        match expected_lights {
            None => expected_lights = Some(images.len()),
            Some(expected) => {
                if images.len() != expected {
                    return Err(SessionError::InconsistentLightCount {
                        view: vi,
                        expected,
                        found: images.len(),
                    });
                }
            }
        }
        // Mask: explicit file, NaN pixels otherwise all-valid.
        let mask = {
            let pfm_path = vdir.join("mask.pfm");
            let png_path = vdir.join("mask.png");
            if pfm_path.exists() {
                load_image(&pfm_path, false)?.map(|v| v.is_finite() && v > 0.0)
            } else if png_path.exists() {
                load_image(&png_path, false)?.map(|v| v > 0.0)
            } else if let Some(img) = images.first() {
                img.map(|v| v.is_finite())
            } else {
                Grid::from_fill(camera.width, camera.height, true)
            }
        };
        let median = if images.is_empty() {
            Grid::from_fill(camera.width, camera.height, f32::NAN)
        } else {
            median_image(&images)
        };
        // Optional per-view light directions/intensities.
        let light_dirs = {
            let p = vdir.join("light_directions.txt");
            if p.exists() {
                let text = std::fs::read_to_string(&p).map_err(|e| SessionError::Unreadable {
                    path: p.display().to_string(),
                    msg: e.to_string(),
                })?;
                let mut dirs = Vec::new();
                for line in text.lines() {
                    let line = line.split('#').next().unwrap_or("").trim();
                    if line.is_empty() {
                        continue;
                    }
                    let v: Vec<f64> = line
                        .split_whitespace()
                        .filter_map(|t| t.parse().ok())
                        .collect();
                    if v.len() != 3 {
                        return Err(SessionError::Unreadable {
                            path: p.display().to_string(),
                            msg: format!("bad direction line: {line}"),
                        });
                    }
                    dirs.push(Vector3::new(v[0], v[1], v[2]).normalize());
                }
                Some(dirs)
            } else {
                None
            }
        };
        let light_intensities = {
            let p = vdir.join("light_intensities.txt");
            if p.exists() {
                let text = std::fs::read_to_string(&p).map_err(|e| SessionError::Unreadable {
                    path: p.display().to_string(),
                    msg: e.to_string(),
                })?;
                Some(
                    text.lines()
                        .filter_map(|l| {
                            let l = l.split('#').next().unwrap_or("").trim();
                            if l.is_empty() {
                                None
                            } else {
                                // RGB intensities collapse to their mean.
                                let vals: Vec<f64> =
                                    l.split_whitespace().filter_map(|t| t.parse().ok()).collect();
                                Some(vals.iter().sum::<f64>() / vals.len().max(1) as f64)
                            }
                        })
                        .collect(),
                )
            } else {
                None
            }
        };
        if let Some(dirs) = &light_dirs {
            if dirs.len() != images.len() {
                return Err(SessionError::InconsistentLightCount {
                    view: vi,
                    expected: images.len(),
                    found: dirs.len(),
                });
            }
        }
        views.push(View {
            camera,
            images,
            mask,
            median,
            light_dirs,
            light_intensities,
        });
    }
    Ok(CaptureSession {
        views,
        rig,
        volume,
        units_per_mm,
    })
}

/// Write a session directory (images as PFM).
pub fn save_session(dir: &Path, session: &CaptureSession) -> Result<(), SessionError> {
    let mkdir = |p: &Path| {
        std::fs::create_dir_all(p).map_err(|e| SessionError::Unreadable {
            path: p.display().to_string(),
            msg: e.to_string(),
        })
    };
    mkdir(dir)?;
    let cameras: Vec<CameraModel> = session.views.iter().map(|v| v.camera.clone()).collect();
    crate::camera::write_cameras_txt(&dir.join("cameras.txt"), &cameras).map_err(|e| {
        SessionError::Unreadable {
            path: dir.join("cameras.txt").display().to_string(),
            msg: e.to_string(),
        }
    })?;
    crate::lightrig::write_lights_txt(&dir.join("lights.txt"), &session.rig).map_err(|e| {
        SessionError::Unreadable {
            path: dir.join("lights.txt").display().to_string(),
            msg: e.to_string(),
        }
    })?;
    if let Some(volume) = &session.volume {
        volume
            .write(&dir.join("intensity_volume.bin"))
            .map_err(|e| SessionError::Unreadable {
                path: dir.join("intensity_volume.bin").display().to_string(),
                msg: e.to_string(),
            })?;
    }
    if (session.units_per_mm - 1.0).abs() > 1e-12 {
        std::fs::write(
            dir.join("session.toml"),
            format!("units_per_mm = {}\n", session.units_per_mm),
        )
        .map_err(|e| SessionError::Unreadable {
            path: dir.join("session.toml").display().to_string(),
            msg: e.to_string(),
        })?;
    }
    for (vi, view) in session.views.iter().enumerate() {
        let vdir = dir.join(view_dir_name(vi));
        mkdir(&vdir)?;
        for (li, img) in view.images.iter().enumerate() {
            pfm::write_gray(&vdir.join(format!("light_{li:03}.pfm")), img)?;
        }
        pfm::write_gray(
            &vdir.join("mask.pfm"),
            &view.mask.map(|b| if b { 1.0f32 } else { 0.0 }),
        )?;
        if let Some(dirs) = &view.light_dirs {
            let mut text = String::new();
            for d in dirs {
                text.push_str(&format!("{:.17e} {:.17e} {:.17e}\n", d.x, d.y, d.z));
            }
            std::fs::write(vdir.join("light_directions.txt"), text).map_err(|e| {
                SessionError::Unreadable {
                    path: vdir.join("light_directions.txt").display().to_string(),
                    msg: e.to_string(),
                }
            })?;
        }
        if let Some(ints) = &view.light_intensities {
            let mut text = String::new();
            for v in ints {
                text.push_str(&format!("{v:.17e}\n"));
            }
            std::fs::write(vdir.join("light_intensities.txt"), text).map_err(|e| {
                SessionError::Unreadable {
                    path: vdir.join("light_intensities.txt").display().to_string(),
                    msg: e.to_string(),
                }
            })?;
        }
    }
    Ok(())
}

/// Read seeds from `x y z [reprojection_error]` lines, applying the
/// reprojection filter when the fourth column is present.
pub fn load_seeds(path: &Path, max_reprojection: f64) -> Result<Vec<Point3<f64>>, SessionError> {
    let text = std::fs::read_to_string(path).map_err(|e| SessionError::Unreadable {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    let mut seeds = Vec::new();
    for line in text.lines() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .filter_map(|t| t.parse().ok())
            .collect();
        if vals.len() < 3 {
            return Err(SessionError::Unreadable {
                path: path.display().to_string(),
                msg: format!("bad seed line: {line}"),
            });
        }
        if vals.len() >= 4 && vals[3] > max_reprojection {
            continue;
        }
        seeds.push(Point3::new(vals[0], vals[1], vals[2]));
    }
    Ok(seeds)
}

/// Paths of the synthetic ground-truth maps of a view.
pub fn gt_paths(dir: &Path, view: usize) -> (PathBuf, PathBuf, PathBuf) {
    (
        dir.join(format!("gt_depth_{view:03}.pfm")),
        dir.join(format!("gt_normal_{view:03}.pfm")),
        dir.join(format!("gt_azimuth_{view:03}.pfm")),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_identical_images_is_identity() {
        let img = Grid::from_fn(4, 3, |x, y| (x + y) as f32);
        let med = median_image(&[img.clone(), img.clone(), img.clone()]);
        for y in 0..3 {
            for x in 0..4 {
                assert_eq!(med.get(x, y), img.get(x, y));
            }
        }
    }

    #[test]
    fn median_picks_middle_value() {
        let mk = |v: f32| Grid::from_fill(1, 1, v);
        let med = median_image(&[mk(9.0), mk(1.0), mk(2.0)]);
        assert_eq!(med.get(0, 0), 2.0);
        let med4 = median_image(&[mk(1.0), mk(2.0), mk(9.0), mk(10.0)]);
        assert_eq!(med4.get(0, 0), 5.5);
    }

    #[test]
    fn missing_cameras_txt_is_reported_by_name() {
        let dir = std::env::temp_dir().join("mvps_session_missing");
        std::fs::create_dir_all(&dir).unwrap();
        let err = load_session(&dir, false).unwrap_err();
        assert!(matches!(err, SessionError::MissingCameras(_)));
        assert!(err.to_string().contains("cameras.txt"));
    }
}

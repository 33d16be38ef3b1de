//! Result evaluation against ground truth: shape distance statistics,
//! azimuth error maps, and per-view normal angular error statistics
//! (mean/median/quartiles/min/max).

use std::path::Path;

use nalgebra::Vector3;
use serde::Serialize;

use crate::img::Grid;
use crate::io::{pfm, ply};
use crate::math::{mean, median, mod_pi_distance, quantile};
use crate::reflectance::raster;
use crate::surface::{shape_error, GtSurface, ShapeErrorStats};

use super::stages::read_gt_shape;

#[derive(Debug, Clone, Serialize)]
pub struct ViewNormalStats {
    pub view: usize,
    pub mean_deg: f64,
    pub median_deg: f64,
    pub q1_deg: f64,
    pub q3_deg: f64,
    pub min_deg: f64,
    pub max_deg: f64,
    pub pixels: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ViewAzimuthStats {
    pub view: usize,
    pub mean_deg: f64,
    pub median_deg: f64,
    pub pixels: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvaluationReport {
    pub shape: Option<ShapeErrorStats>,
    pub normal_per_view: Vec<ViewNormalStats>,
    pub azimuth_per_view: Vec<ViewAzimuthStats>,
    pub frame_mismatch_warning: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum EvaluateError {
    #[error("{0}")]
    Message(String),
}

fn msg(e: impl std::fmt::Display) -> EvaluateError {
    EvaluateError::Message(e.to_string())
}

/// Compare a reconstruction output directory against the ground truth in a
/// session directory.
pub fn evaluate(result_dir: &Path, gt_dir: &Path) -> Result<EvaluationReport, EvaluateError> {
    // The mesh: refined if present, fused otherwise.
    let mesh_path = if result_dir.join("mesh_refined.ply").exists() {
        result_dir.join("mesh_refined.ply")
    } else {
        result_dir.join("mesh_fused.ply")
    };
    let mesh = if mesh_path.exists() {
        Some(ply::read_mesh(&mesh_path).map_err(msg)?)
    } else {
        None
    };

    let gt_shape = {
        let p = gt_dir.join("gt_shape.txt");
        if p.exists() {
            Some(read_gt_shape(&p).map_err(msg)?)
        } else {
            None
        }
    };

    let mut frame_mismatch_warning = false;
    let shape = match (&mesh, &gt_shape) {
        (Some(mesh), Some(shape)) => {
            // Frame heuristic: disjoint bounding boxes are a red flag.
            let mut lo = nalgebra::Point3::new(f64::MAX, f64::MAX, f64::MAX);
            let mut hi = nalgebra::Point3::new(f64::MIN, f64::MIN, f64::MIN);
            for v in &mesh.vertices {
                for k in 0..3 {
                    lo[k] = lo[k].min(v[k]);
                    hi[k] = hi[k].max(v[k]);
                }
            }
            let d = shape.diameter();
            let c = shape.center;
            if hi.x < c.x - d || lo.x > c.x + d || hi.y < c.y - d || lo.y > c.y + d {
                frame_mismatch_warning = true;
            }
            let (stats, _) = shape_error(mesh, &GtSurface::Analytic(shape)).map_err(msg)?;
            Some(stats)
        }
        _ => None,
    };

    // Per-view normal errors from the rasterized mesh vs GT normal maps.
    let cameras_path = gt_dir.join("cameras.txt");
    let mut normal_per_view = Vec::new();
    let mut azimuth_per_view = Vec::new();
    if cameras_path.exists() {
        let cameras = crate::camera::read_cameras_txt(&cameras_path).map_err(msg)?;
        for (vi, camera) in cameras.iter().enumerate() {
            let (_, normal_p, azimuth_p) = super::session::gt_paths(gt_dir, vi);
            if let (Some(mesh), true) = (&mesh, normal_p.exists()) {
                let gt_normals = pfm::read_rgb(&normal_p).map_err(msg)?;
                let rastered = raster::rasterize(mesh, camera);
                let mut errors = Vec::new();
                for y in 0..gt_normals.height() {
                    for x in 0..gt_normals.width() {
                        let gt_n = gt_normals.get(x, y);
                        if !gt_n[0].is_finite() {
                            continue;
                        }
                        let Some(n_world) = raster::normal_at(&rastered, x, y) else {
                            continue;
                        };
                        // GT normals live in the camera frame.
                        let n_cam = camera.rotation * n_world;
                        let gt_v = Vector3::new(gt_n[0] as f64, gt_n[1] as f64, gt_n[2] as f64);
                        let mut dot = n_cam.dot(&gt_v).clamp(-1.0, 1.0);
                        // The mesh winding decides the raster normal sign.
                        dot = dot.abs().min(1.0);
                        errors.push(dot.acos().to_degrees());
                    }
                }
                if !errors.is_empty() {
                    normal_per_view.push(ViewNormalStats {
                        view: vi,
                        mean_deg: mean(&errors),
                        median_deg: median(&errors),
                        q1_deg: quantile(&errors, 0.25),
                        q3_deg: quantile(&errors, 0.75),
                        min_deg: errors.iter().copied().fold(f64::MAX, f64::min),
                        max_deg: errors.iter().copied().fold(f64::MIN, f64::max),
                        pixels: errors.len(),
                    });
                }
            }
            // Azimuth error maps: estimated maps against GT azimuths.
            if azimuth_p.exists() {
                let gt_az = pfm::read_gray(&azimuth_p).map_err(msg)?;
                // Unsubdivided estimates only (cell 00 of an unsubdivided
                // run covers the full view).
                let est_path = result_dir.join(format!("azimuth_{vi:03}_00.pfm"));
                if est_path.exists() {
                    let est = pfm::read_gray(&est_path).map_err(msg)?;
                    if est.width() == gt_az.width() && est.height() == gt_az.height() {
                        let mut errors = Vec::new();
                        for y in 0..est.height() {
                            for x in 0..est.width() {
                                let a = est.get(x, y) as f64;
                                let b = gt_az.get(x, y) as f64;
                                if a.is_finite() && b.is_finite() {
                                    errors.push(mod_pi_distance(a, b).to_degrees());
                                }
                            }
                        }
                        if !errors.is_empty() {
                            let err_map = Grid::from_fn(est.width(), est.height(), |x, y| {
                                let a = est.get(x, y) as f64;
                                let b = gt_az.get(x, y) as f64;
                                if a.is_finite() && b.is_finite() {
                                    mod_pi_distance(a, b).to_degrees() as f32
                                } else {
                                    f32::NAN
                                }
                            });
                            let _ = pfm::write_gray(
                                &result_dir.join(format!("azimuth_error_{vi:03}.pfm")),
                                &err_map,
                            );
                            azimuth_per_view.push(ViewAzimuthStats {
                                view: vi,
                                mean_deg: mean(&errors),
                                median_deg: median(&errors),
                                pixels: errors.len(),
                            });
                        }
                    }
                }
            }
        }
    }

    let report = EvaluationReport {
        shape,
        normal_per_view,
        azimuth_per_view,
        frame_mismatch_warning,
    };
    let json = serde_json::to_string_pretty(&report).map_err(msg)?;
    std::fs::write(result_dir.join("evaluation.json"), json).map_err(msg)?;
    Ok(report)
}

//! Reconstruction stage orchestration: normalize → (subdivide) → azimuth →
//! contours → propagation → fuse → refine → BRDF fit → re-render, with every
//! intermediate artifact written to the output directory and a
//! machine-readable report at the end. Azimuth and contour results are
//! cached content-addressed (full f64 fidelity), so prefix re-runs are
//! byte-identical.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::{Point2, Point3, UnitQuaternion, Vector3};
use serde::Serialize;

use crate::azimuth::{azimuth_map, AzimuthMap, IntensityProfile};
use crate::camera::{identity_cell, subdivide, warp, warp_mask, CameraModel, OrthoCell};
use crate::contour::{detect_discontinuities, trace_all, IsoDepthContour};
use crate::img::Grid;
use crate::io::{pfm, ply};
use crate::lightrig::{normalize_stack, resample_to_circle, CircleSpec, DiskInterpolator, IntensityVolume, RigMode};
use crate::math::fnv1a64;
use crate::propagate::{run_propagation, PropFrame, PropView, PropagationReport};
use crate::reflectance::{
    build_observation_matrix, fit_svbrdf, render_svbrdf, write_svbrdf, FitOptions,
    ObservationOptions, ObsView, Svbrdf,
};
use crate::surface::{fuse_points, refine, shape_error, FuseOptions, GtSurface, ShapeErrorStats, TriangleMesh};
use crate::synth::AnalyticShape;

use super::config::PipelineConfig;
use super::session::{load_seeds, load_session, CaptureSession, View};

/// Pipeline stages in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum Stage {
    Normalize,
    Azimuth,
    Contours,
    Propagate,
    Fuse,
    Refine,
    Brdf,
}

impl Stage {
    pub fn parse(name: &str) -> Result<Self, String> {
        Ok(match name {
            "normalize" => Stage::Normalize,
            "azimuth" => Stage::Azimuth,
            "contours" => Stage::Contours,
            "propagate" => Stage::Propagate,
            "fuse" => Stage::Fuse,
            "refine" => Stage::Refine,
            "brdf" => Stage::Brdf,
            other => {
                return Err(format!(
                    "unknown stage {other}; expected one of normalize, azimuth, contours, propagate, fuse, refine, brdf"
                ))
            }
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Stage::Normalize => "normalize",
            Stage::Azimuth => "azimuth",
            Stage::Contours => "contours",
            Stage::Propagate => "propagate",
            Stage::Fuse => "fuse",
            Stage::Refine => "refine",
            Stage::Brdf => "brdf",
        }
    }
}

/// A stage failure carries the stage name and the artifacts of the stages
/// that did complete.
#[derive(Debug, thiserror::Error)]
#[error("stage {stage} failed: {message}")]
pub struct StageError {
    pub stage: String,
    pub message: String,
    pub completed: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ViewStats {
    pub valid_azimuth_pixels: usize,
    pub mask_pixels: usize,
    pub contours: usize,
    pub claimed_pixels: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct RerenderStats {
    pub per_view_relative_rmse: Vec<f64>,
    pub mean_relative_rmse: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReconstructionReport {
    pub config_toml: String,
    pub subdivided: bool,
    pub cells: (usize, usize),
    pub views: Vec<ViewStats>,
    pub seeds_loaded: usize,
    pub propagation: Option<PropagationReport>,
    pub point_count: usize,
    pub coverage: f64,
    pub fused_shape_error: Option<ShapeErrorStats>,
    pub refined_shape_error: Option<ShapeErrorStats>,
    pub rerender: Option<RerenderStats>,
    pub artifacts: BTreeMap<String, String>,
}

fn stage_err(stage: &str, message: impl std::fmt::Display, completed: &BTreeMap<String, String>) -> StageError {
    StageError {
        stage: stage.to_string(),
        message: message.to_string(),
        completed: completed.values().cloned().collect(),
    }
}

/// Ground-truth analytic shape descriptor (`gt_shape.txt`).
pub fn write_gt_shape(path: &Path, shape: &AnalyticShape) -> std::io::Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let kind = match shape.kind {
        crate::synth::ShapeKind::Plane => "plane",
        crate::synth::ShapeKind::Sphere => "sphere",
        crate::synth::ShapeKind::Cylinder => "cylinder",
        crate::synth::ShapeKind::Torus => "torus",
    };
    writeln!(f, "kind {kind}")?;
    writeln!(
        f,
        "center {:.17e} {:.17e} {:.17e}",
        shape.center.x, shape.center.y, shape.center.z
    )?;
    writeln!(f, "r1 {:.17e}", shape.r1)?;
    writeln!(f, "r2 {:.17e}", shape.r2)?;
    let q = shape.orientation.quaternion();
    writeln!(f, "quat {:.17e} {:.17e} {:.17e} {:.17e}", q.w, q.i, q.j, q.k)?;
    Ok(())
}

pub fn read_gt_shape(path: &Path) -> Result<AnalyticShape, String> {
    let text = std::fs::read_to_string(path).map_err(|e| e.to_string())?;
    let mut kind = None;
    let mut center = Point3::origin();
    let mut r1 = 1.0;
    let mut r2 = 0.0;
    let mut quat = UnitQuaternion::identity();
    for line in text.lines() {
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.first().copied() {
            Some("kind") => kind = Some(toks[1].to_string()),
            Some("center") => {
                center = Point3::new(
                    toks[1].parse().map_err(|e| format!("{e}"))?,
                    toks[2].parse().map_err(|e| format!("{e}"))?,
                    toks[3].parse().map_err(|e| format!("{e}"))?,
                )
            }
            Some("r1") => r1 = toks[1].parse().map_err(|e| format!("{e}"))?,
            Some("r2") => r2 = toks[1].parse().map_err(|e| format!("{e}"))?,
            Some("quat") => {
                let w: f64 = toks[1].parse().map_err(|e| format!("{e}"))?;
                let i: f64 = toks[2].parse().map_err(|e| format!("{e}"))?;
                let j: f64 = toks[3].parse().map_err(|e| format!("{e}"))?;
                let k: f64 = toks[4].parse().map_err(|e| format!("{e}"))?;
                quat = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(w, i, j, k));
            }
            _ => {}
        }
    }
    let kind = kind.ok_or("gt_shape.txt missing kind")?;
    Ok(match kind.as_str() {
        "sphere" => AnalyticShape::sphere(center, r1),
        "plane" => AnalyticShape::plane(center, quat),
        "cylinder" => AnalyticShape::cylinder(center, r1, quat),
        "torus" => AnalyticShape::torus(center, r1, r2, quat),
        other => return Err(format!("unknown gt shape kind {other}")),
    })
}

/// Everything the azimuth/contour stages produce for one estimation frame.
struct CellData {
    cell: OrthoCell,
    azimuth: AzimuthMap,
    contours: Vec<IsoDepthContour>,
}

struct PreparedView {
    camera: CameraModel,
    mask: Grid<bool>,
    cells: Vec<CellData>,
    valid_azimuth: usize,
}

/// Full f64 grid dump used by the stage cache (PFM artifacts are f32).
fn write_f64_grid(path: &Path, grid: &Grid<f64>) -> std::io::Result<()> {
    use crate::io::{write_f64, write_u64};
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_u64(&mut w, grid.width() as u64)?;
    write_u64(&mut w, grid.height() as u64)?;
    for &v in grid.data() {
        write_f64(&mut w, v)?;
    }
    Ok(())
}

fn read_f64_grid(path: &Path) -> std::io::Result<Grid<f64>> {
    use crate::io::{read_f64, read_u64};
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let w = read_u64(&mut r)? as usize;
    let h = read_u64(&mut r)? as usize;
    let mut data = Vec::with_capacity(w * h);
    for _ in 0..w * h {
        data.push(read_f64(&mut r)?);
    }
    Ok(Grid::from_vec(w, h, data))
}

fn write_contours_f64(path: &Path, contours: &[IsoDepthContour]) -> std::io::Result<()> {
    use crate::io::{write_f64, write_u32, write_u64};
    use std::io::Write;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_u64(&mut w, contours.len() as u64)?;
    for c in contours {
        write_u32(&mut w, c.view)?;
        w.write_all(&c.cell.to_le_bytes())?;
        write_f64(&mut w, c.confidence)?;
        write_u64(&mut w, c.points.len() as u64)?;
        for p in &c.points {
            write_f64(&mut w, p[0])?;
            write_f64(&mut w, p[1])?;
        }
    }
    Ok(())
}

fn read_contours_f64(path: &Path) -> std::io::Result<Vec<IsoDepthContour>> {
    use crate::io::{read_f64, read_u32, read_u64};
    use std::io::Read;
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let n = read_u64(&mut r)? as usize;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let view = read_u32(&mut r)?;
        let mut cell_b = [0u8; 4];
        r.read_exact(&mut cell_b)?;
        let cell = i32::from_le_bytes(cell_b);
        let confidence = read_f64(&mut r)?;
        let count = read_u64(&mut r)? as usize;
        let mut points = Vec::with_capacity(count);
        for _ in 0..count {
            let x = read_f64(&mut r)?;
            let y = read_f64(&mut r)?;
            points.push([x, y]);
        }
        out.push(IsoDepthContour {
            view,
            cell,
            confidence,
            points,
            seed_index: i as u64,
        });
    }
    Ok(out)
}

/// Hash everything the azimuth/contour stages depend on.
fn session_fingerprint(config: &PipelineConfig, session: &CaptureSession, approx_depths: &[f64]) -> u64 {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(config.to_toml().as_bytes());
    for d in approx_depths {
        bytes.extend_from_slice(&d.to_le_bytes());
    }
    let mut h = fnv1a64(&bytes);
    for view in &session.views {
        for img in &view.images {
            let raw: Vec<u8> = img.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            h = h.wrapping_mul(31).wrapping_add(fnv1a64(&raw));
        }
    }
    h
}

/// Per-pixel light directions in a cell frame at the constant-depth plane.
fn pixel_light_dirs(
    camera: &CameraModel,
    cell: &OrthoCell,
    x: usize,
    y: usize,
    approx_depth: f64,
    leds_cam: &[Point3<f64>],
) -> Vec<Vector3<f64>> {
    // Cell pixel → parent pixel → point on the z = approx_depth plane.
    let parent = cell.to_parent(&Point2::new(x as f64, y as f64));
    let dir = camera.ray_dir_cam(&parent);
    let origin = match camera.intrinsics {
        crate::camera::Intrinsics::Orthographic { .. } => camera.backproject_cam(&parent, 0.0),
        crate::camera::Intrinsics::Perspective { .. } => Point3::origin(),
    };
    let t = (approx_depth - origin.z) / dir.z;
    let p = origin + dir * t;
    let rot_inv = cell.rotation.inverse();
    leds_cam
        .iter()
        .map(|led| rot_inv * (led - p).normalize())
        .collect()
}

/// The virtual circle spec for a set of local light directions: median
/// elevation of the outer ring, sample count of that ring.
fn circle_spec_for(dirs: &[Vector3<f64>], outer_range: (usize, usize)) -> CircleSpec {
    let outer: Vec<Vector3<f64>> = dirs[outer_range.0..outer_range.1].to_vec();
    CircleSpec {
        elevation: crate::lightrig::median_elevation(&outer),
        samples: (outer_range.1 - outer_range.0).max(8),
    }
}

/// Index range of the outer (largest-radius) ring in the flat LED order.
fn outer_ring_range(rig: &crate::lightrig::LightRig) -> (usize, usize) {
    if rig.circles.is_empty() {
        return (0, rig.led_count());
    }
    let mut best = 0usize;
    for (ci, c) in rig.circles.iter().enumerate() {
        if c.radius > rig.circles[best].radius {
            best = ci;
        }
    }
    let mut start = 0;
    for c in &rig.circles[..best] {
        start += c.count;
    }
    (start, start + rig.circles[best].count)
}

struct AzimuthStageOutput {
    prepared: Vec<PreparedView>,
}

#[allow(clippy::too_many_arguments)]
fn azimuth_and_contours(
    config: &PipelineConfig,
    session: &CaptureSession,
    normalized: &[Vec<Grid<f32>>],
    approx_depths: &[f64],
    subdivided: bool,
    out: &Path,
    artifacts: &mut BTreeMap<String, String>,
    fingerprint: u64,
) -> Result<AzimuthStageOutput, String> {
    let cache_dir = out.join("cache");
    std::fs::create_dir_all(&cache_dir).map_err(|e| e.to_string())?;
    let stamp_path = cache_dir.join("stage.fingerprint");
    let cache_valid = config.cache
        && std::fs::read_to_string(&stamp_path)
            .map(|s| s.trim() == format!("{fingerprint:016x}"))
            .unwrap_or(false);

    let azimuth_options = config.azimuth.options();
    let trace_options = config.contour.options();
    let outer = outer_ring_range(&session.rig);
    let mut prepared = Vec::with_capacity(session.views.len());

    for (vi, view) in session.views.iter().enumerate() {
        let camera = &view.camera;
        let cells: Vec<OrthoCell> = if subdivided {
            subdivide(
                camera,
                config.subdivision.rows,
                config.subdivision.cols,
                config.subdivision.margin,
                approx_depths[vi],
                vi,
            )
        } else {
            vec![identity_cell(camera, approx_depths[vi], vi)]
        };
        let mut cell_data = Vec::with_capacity(cells.len());
        let mut valid_azimuth = 0usize;
        for (ci, cell) in cells.into_iter().enumerate() {
            let cell_tag = if subdivided { ci as i32 } else { -1 };
            let az_cache = cache_dir.join(format!("azimuth_{vi:03}_{ci:02}.f64"));
            let en_cache = cache_dir.join(format!("energy_{vi:03}_{ci:02}.f64"));
            let rs_cache = cache_dir.join(format!("residual_{vi:03}_{ci:02}.f64"));
            let ct_cache = cache_dir.join(format!("contours_{vi:03}_{ci:02}.f64bin"));

            let (stack, mask): (Vec<Grid<f32>>, Grid<bool>) = if subdivided {
                let stack = normalized[vi]
                    .iter()
                    .map(|img| warp(img, &cell.homography, cell.width, cell.height))
                    .collect::<Result<_, _>>()
                    .map_err(|e| e.to_string())?;
                let mask = warp_mask(&view.mask, &cell.homography, cell.width, cell.height);
                (stack, mask)
            } else {
                (normalized[vi].clone(), view.mask.clone())
            };

            let (map, contours) = if cache_valid
                && az_cache.exists()
                && en_cache.exists()
                && rs_cache.exists()
                && ct_cache.exists()
            {
                let map = AzimuthMap {
                    theta: read_f64_grid(&az_cache).map_err(|e| e.to_string())?,
                    energy: read_f64_grid(&en_cache).map_err(|e| e.to_string())?,
                    residual: read_f64_grid(&rs_cache).map_err(|e| e.to_string())?,
                };
                let contours = read_contours_f64(&ct_cache).map_err(|e| e.to_string())?;
                (map, contours)
            } else {
                let map = compute_azimuth_map(
                    config,
                    session,
                    view,
                    &stack,
                    &mask,
                    &cell,
                    vi,
                    approx_depths[vi],
                    outer,
                    &azimuth_options,
                )?;
                let disc = detect_discontinuities(&stack, &mask, &trace_options);
                let contours = trace_all(&map.theta, &disc, vi as u32, cell_tag, &trace_options);
                write_f64_grid(&az_cache, &map.theta).map_err(|e| e.to_string())?;
                write_f64_grid(&en_cache, &map.energy).map_err(|e| e.to_string())?;
                write_f64_grid(&rs_cache, &map.residual).map_err(|e| e.to_string())?;
                write_contours_f64(&ct_cache, &contours).map_err(|e| e.to_string())?;
                (map, contours)
            };

            // Public artifacts (float32 PFM / binary contours).
            let az_pfm = out.join(format!("azimuth_{vi:03}_{ci:02}.pfm"));
            pfm::write_gray(&az_pfm, &map.theta.map(|v| v as f32)).map_err(|e| e.to_string())?;
            pfm::write_gray(
                &out.join(format!("energy_{vi:03}_{ci:02}.pfm")),
                &map.energy.map(|v| v as f32),
            )
            .map_err(|e| e.to_string())?;
            pfm::write_gray(
                &out.join(format!("residual_{vi:03}_{ci:02}.pfm")),
                &map.residual.map(|v| v as f32),
            )
            .map_err(|e| e.to_string())?;
            artifacts.insert(
                format!("azimuth_{vi:03}_{ci:02}"),
                az_pfm.display().to_string(),
            );
            valid_azimuth += map.theta.data().iter().filter(|v| v.is_finite()).count();
            cell_data.push(CellData {
                cell,
                azimuth: map,
                contours,
            });
        }
        prepared.push(PreparedView {
            camera: camera.clone(),
            mask: view.mask.clone(),
            cells: cell_data,
            valid_azimuth,
        });
    }
    if config.cache {
        std::fs::write(&stamp_path, format!("{fingerprint:016x}")).map_err(|e| e.to_string())?;
    }
    Ok(AzimuthStageOutput { prepared })
}

/// Azimuth estimation for one cell of one view, choosing the direct or
/// resampled profile path.
#[allow(clippy::too_many_arguments)]
fn compute_azimuth_map(
    config: &PipelineConfig,
    session: &CaptureSession,
    view: &View,
    stack: &[Grid<f32>],
    mask: &Grid<bool>,
    cell: &OrthoCell,
    _vi: usize,
    approx_depth: f64,
    outer: (usize, usize),
    options: &crate::azimuth::AzimuthOptions,
) -> Result<AzimuthMap, String> {
    let w = mask.width();
    let h = mask.height();
    if stack.len() < 5 {
        return Err(format!(
            "azimuth estimation requires at least 5 LEDs, got {}",
            stack.len()
        ));
    }
    let identity = cell.rotation.angle() < 1e-15
        && (cell.homography - nalgebra::Matrix3::identity()).norm() < 1e-12;
    let rot_inv = cell.rotation.inverse();

    // Case 1: explicit per-view directions (DiLiGenT-style): constant
    // directions per view, expressed in the cell frame, always resampled.
    if let Some(dirs) = &view.light_dirs {
        let cell_dirs: Vec<Vector3<f64>> = dirs.iter().map(|d| rot_inv * d).collect();
        let intensities = view.light_intensities.clone();
        let spec = CircleSpec {
            elevation: crate::lightrig::median_elevation(&cell_dirs),
            samples: cell_dirs.len().max(8),
        };
        let source = ResampledConstantSource::new(stack, mask, &cell_dirs, intensities, spec)?;
        return Ok(azimuth_map(w, h, &source, options));
    }

    let leds_cam = session.rig.led_positions();
    match session.rig.mode {
        RigMode::DistantDirectional => {
            let dirs_cam: Vec<Vector3<f64>> = (0..session.rig.led_count())
                .map(|i| session.rig.nominal_direction(i))
                .collect();
            if identity && session.rig.is_camera_centered() && !config.azimuth.force_resample {
                // Direct profile: exact view-centered circles.
                let labels: Vec<f64> = dirs_cam.iter().map(|d| d.y.atan2(d.x)).collect();
                let source = DirectSource {
                    stack,
                    mask,
                    labels,
                };
                Ok(azimuth_map(w, h, &source, options))
            } else {
                // Fixed directions in the cell frame; one interpolation plan.
                let cell_dirs: Vec<Vector3<f64>> = dirs_cam.iter().map(|d| rot_inv * d).collect();
                let spec = circle_spec_for(&cell_dirs, outer);
                let source = ResampledConstantSource::new(stack, mask, &cell_dirs, None, spec)?;
                Ok(azimuth_map(w, h, &source, options))
            }
        }
        RigMode::NearPoint => {
            if !config.normalize.resample {
                // Corrections disabled: pretend the nominal directions hold
                // everywhere (the uncorrected baseline of the ablations).
                let labels: Vec<f64> = (0..session.rig.led_count())
                    .map(|i| {
                        let d = rot_inv * session.rig.nominal_direction(i);
                        d.y.atan2(d.x)
                    })
                    .collect();
                let source = DirectSource {
                    stack,
                    mask,
                    labels,
                };
                return Ok(azimuth_map(w, h, &source, options));
            }
            let camera = view.camera.clone();
            let source = ResampledNearSource {
                stack,
                mask,
                camera,
                cell: cell.clone(),
                approx_depth,
                leds_cam,
                outer,
            };
            Ok(azimuth_map(w, h, &source, options))
        }
    }
}

/// Profile source for exact view-centered circle rigs: labels are the
/// nominal light azimuths.
struct DirectSource<'a> {
    stack: &'a [Grid<f32>],
    mask: &'a Grid<bool>,
    labels: Vec<f64>,
}

impl crate::azimuth::ProfileSource for DirectSource<'_> {
    fn profile(&self, x: usize, y: usize) -> Option<IntensityProfile> {
        if !self.mask.get(x, y) {
            return None;
        }
        let intensities: Vec<Option<f64>> = self
            .stack
            .iter()
            .map(|img| {
                let v = img.get(x, y);
                if v.is_finite() {
                    Some(v as f64)
                } else {
                    None
                }
            })
            .collect();
        Some(IntensityProfile {
            azimuths: self.labels.clone(),
            intensities,
        })
    }
}

/// Resampling source for constant per-view directions: the Delaunay plan is
/// computed once and reused for every pixel.
struct ResampledConstantSource<'a> {
    stack: &'a [Grid<f32>],
    mask: &'a Grid<bool>,
    intensity_scale: Option<Vec<f64>>,
    plans: Vec<Option<([usize; 3], [f64; 3])>>,
    target_azimuths: Vec<f64>,
}

impl<'a> ResampledConstantSource<'a> {
    fn new(
        stack: &'a [Grid<f32>],
        mask: &'a Grid<bool>,
        dirs: &[Vector3<f64>],
        intensity_scale: Option<Vec<f64>>,
        spec: CircleSpec,
    ) -> Result<Self, String> {
        let points: Vec<[f64; 2]> = dirs.iter().map(|d| [d.x, d.y]).collect();
        let interp = DiskInterpolator::new(&points).map_err(|e| e.to_string())?;
        let r = spec.elevation.sin();
        let queries: Vec<[f64; 2]> = (0..spec.samples)
            .map(|j| {
                let a = std::f64::consts::TAU * j as f64 / spec.samples as f64;
                [r * a.cos(), r * a.sin()]
            })
            .collect();
        let plans = interp.plan(&queries);
        let target_azimuths = (0..spec.samples)
            .map(|j| std::f64::consts::TAU * j as f64 / spec.samples as f64)
            .collect();
        Ok(Self {
            stack,
            mask,
            intensity_scale,
            plans,
            target_azimuths,
        })
    }
}

impl crate::azimuth::ProfileSource for ResampledConstantSource<'_> {
    fn profile(&self, x: usize, y: usize) -> Option<IntensityProfile> {
        if !self.mask.get(x, y) {
            return None;
        }
        let values: Vec<Option<f64>> = self
            .stack
            .iter()
            .enumerate()
            .map(|(li, img)| {
                let v = img.get(x, y);
                if !v.is_finite() {
                    return None;
                }
                let scale = self
                    .intensity_scale
                    .as_ref()
                    .map(|s| s[li])
                    .unwrap_or(1.0);
                if scale <= 0.0 {
                    return None;
                }
                Some(v as f64 / scale)
            })
            .collect();
        let intensities: Vec<Option<f64>> = self
            .plans
            .iter()
            .map(|plan| {
                let (idx, w) = plan.as_ref()?;
                let mut acc = 0.0;
                for c in 0..3 {
                    acc += w[c] * values[idx[c]]?;
                }
                Some(acc)
            })
            .collect();
        Some(IntensityProfile {
            azimuths: self.target_azimuths.clone(),
            intensities,
        })
    }
}

/// Resampling source for near-point lights: directions (and the virtual
/// circle) vary per pixel.
struct ResampledNearSource<'a> {
    stack: &'a [Grid<f32>],
    mask: &'a Grid<bool>,
    camera: CameraModel,
    cell: OrthoCell,
    approx_depth: f64,
    leds_cam: Vec<Point3<f64>>,
    outer: (usize, usize),
}

impl crate::azimuth::ProfileSource for ResampledNearSource<'_> {
    fn profile(&self, x: usize, y: usize) -> Option<IntensityProfile> {
        if !self.mask.get(x, y) {
            return None;
        }
        let dirs = pixel_light_dirs(
            &self.camera,
            &self.cell,
            x,
            y,
            self.approx_depth,
            &self.leds_cam,
        );
        let observations: Vec<(Vector3<f64>, f64)> = dirs
            .iter()
            .zip(self.stack.iter())
            .filter_map(|(d, img)| {
                let v = img.get(x, y);
                if v.is_finite() {
                    Some((*d, v as f64))
                } else {
                    None
                }
            })
            .collect();
        if observations.len() < 5 {
            return None;
        }
        let spec = circle_spec_for(&dirs, self.outer);
        resample_to_circle(&observations, &spec).ok()
    }
}

/// Run the full reconstruction chain.
pub fn reconstruct(config: &PipelineConfig, out: &Path) -> Result<ReconstructionReport, StageError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.threads)
        .build()
        .map_err(|e| stage_err("setup", e, &BTreeMap::new()))?;
    pool.install(|| reconstruct_inner(config, out))
}

fn reconstruct_inner(
    config: &PipelineConfig,
    out: &Path,
) -> Result<ReconstructionReport, StageError> {
    let mut artifacts: BTreeMap<String, String> = BTreeMap::new();
    std::fs::create_dir_all(out).map_err(|e| stage_err("setup", e, &artifacts))?;
    let stop_after = config
        .stop_after
        .as_ref()
        .map(|s| Stage::parse(s).expect("validated"));
    let session_dir = PathBuf::from(&config.session.dir);
    let srgb = config.session.gamma == "srgb";
    let session =
        load_session(&session_dir, srgb).map_err(|e| stage_err("load", e, &artifacts))?;
    let seeds_path = config
        .session
        .seeds
        .as_ref()
        .map(PathBuf::from)
        .unwrap_or_else(|| session_dir.join("seeds.txt"));
    let seeds = load_seeds(&seeds_path, config.session.max_seed_reprojection_px)
        .map_err(|e| stage_err("load", e, &artifacts))?;

    // Approximate per-view object depth from the seeds.
    let approx_depths: Vec<f64> = session
        .views
        .iter()
        .map(|v| {
            let mut depths: Vec<f64> = seeds
                .iter()
                .filter_map(|s| {
                    let px = v.camera.project(s).ok()?;
                    if v.mask.at(px.x.round() as i64, px.y.round() as i64) {
                        Some(v.camera.depth_of(s))
                    } else {
                        None
                    }
                })
                .collect();
            if depths.is_empty() {
                depths = seeds.iter().map(|s| v.camera.depth_of(s)).collect();
            }
            if depths.is_empty() {
                session.rig.reference_depth
            } else {
                crate::math::mean(&depths)
            }
        })
        .collect();

    // Stage: normalize.
    let near = session.rig.mode == RigMode::NearPoint;
    let mut normalized: Vec<Vec<Grid<f32>>> = Vec::with_capacity(session.views.len());
    if near && config.normalize.enable {
        let volume = match &session.volume {
            Some(v) => {
                if config.normalize.mean_intensity_only {
                    IntensityVolume::uniform(&v.mean_per_led())
                } else {
                    v.clone()
                }
            }
            None => {
                return Err(stage_err(
                    Stage::Normalize.name(),
                    super::session::SessionError::MissingCalibration,
                    &artifacts,
                ))
            }
        };
        for (vi, view) in session.views.iter().enumerate() {
            let stack = normalize_stack(&view.images, &volume, &view.camera, approx_depths[vi])
                .map_err(|e| stage_err(Stage::Normalize.name(), e, &artifacts))?;
            normalized.push(stack);
        }
    } else {
        for view in &session.views {
            // Per-view intensity scalars (explicit-direction sessions) are
            // divided out here.
            if let Some(ints) = &view.light_intensities {
                let stack = view
                    .images
                    .iter()
                    .zip(ints.iter())
                    .map(|(img, &s)| {
                        if s > 0.0 {
                            img.map(|v| (v as f64 / s) as f32)
                        } else {
                            img.clone()
                        }
                    })
                    .collect();
                normalized.push(stack);
            } else {
                normalized.push(view.images.clone());
            }
        }
    }
    if stop_after == Some(Stage::Normalize) {
        return finish_report(config, out, artifacts, Vec::new(), 0, None, 0, 0.0, None, None, None, false, (1, 1), seeds.len());
    }

    // Subdivision decision.
    let max_fov = session
        .views
        .iter()
        .map(|v| v.camera.fov_deg())
        .fold(0.0f64, f64::max);
    let subdivided = match config.subdivision.force {
        Some(f) => f && session.views.iter().any(|v| v.camera.is_perspective()),
        None => {
            config.subdivision.auto
                && session.views.iter().any(|v| v.camera.is_perspective())
                && max_fov >= config.subdivision.fov_threshold_deg
        }
    };
    let cells_grid = if subdivided {
        (config.subdivision.rows, config.subdivision.cols)
    } else {
        (1, 1)
    };

    // Stages: azimuth + contours (cached together).
    let fingerprint = session_fingerprint(config, &session, &approx_depths);
    let azc = azimuth_and_contours(
        config,
        &session,
        &normalized,
        &approx_depths,
        subdivided,
        out,
        &mut artifacts,
        fingerprint,
    )
    .map_err(|e| stage_err(Stage::Azimuth.name(), e, &artifacts))?;
    let prepared = azc.prepared;

    // Public contour artifact.
    let all_contours: Vec<IsoDepthContour> = prepared
        .iter()
        .flat_map(|v| v.cells.iter().flat_map(|c| c.contours.clone()))
        .collect();
    let contours_path = out.join("contours.bin");
    crate::contour::write_contours(&contours_path, &all_contours)
        .map_err(|e| stage_err(Stage::Contours.name(), e, &artifacts))?;
    artifacts.insert("contours".into(), contours_path.display().to_string());

    let view_stats: Vec<ViewStats> = prepared
        .iter()
        .map(|v| ViewStats {
            valid_azimuth_pixels: v.valid_azimuth,
            mask_pixels: v.mask.count_true(),
            contours: v.cells.iter().map(|c| c.contours.len()).sum(),
            claimed_pixels: 0,
        })
        .collect();
    if stop_after == Some(Stage::Azimuth) || stop_after == Some(Stage::Contours) {
        return finish_report(
            config, out, artifacts, view_stats, seeds.len(), None, 0, 0.0, None, None, None,
            subdivided, cells_grid, seeds.len(),
        );
    }

    // Stage: propagate.
    let prop_views: Vec<PropView> = prepared
        .iter()
        .map(|v| {
            let frames: Vec<PropFrame> = v
                .cells
                .iter()
                .map(|c| PropFrame {
                    rotation: c.cell.rotation,
                    homography: c.cell.homography,
                    homography_inv: c
                        .cell
                        .homography
                        .try_inverse()
                        .expect("cell homography invertible"),
                    azimuth: c.azimuth.theta.clone(),
                })
                .collect();
            let single_frame = frames.len() == 1;
            let contours: Vec<IsoDepthContour> = v
                .cells
                .iter()
                .enumerate()
                .flat_map(|(ci, c)| {
                    c.contours.iter().cloned().map(move |mut contour| {
                        contour.cell = if single_frame { -1 } else { ci as i32 };
                        contour
                    })
                })
                .collect();
            PropView {
                camera: v.camera.clone(),
                mask: v.mask.clone(),
                frames,
                cell_rows: if subdivided { config.subdivision.rows } else { 1 },
                cell_cols: if subdivided { config.subdivision.cols } else { 1 },
                contours,
            }
        })
        .collect();
    let prop = run_propagation(&seeds, &prop_views, &config.propagate)
        .map_err(|e| stage_err(Stage::Propagate.name(), e, &artifacts))?;
    let points_path = out.join("points.ply");
    ply::write_points(&points_path, &prop.points, true)
        .map_err(|e| stage_err(Stage::Propagate.name(), e, &artifacts))?;
    artifacts.insert("points".into(), points_path.display().to_string());

    let mut view_stats = view_stats;
    let mut claimed_total = 0usize;
    let mut mask_total = 0usize;
    for (vi, ledger) in prop.ledgers.iter().enumerate() {
        let claimed = ledger.data().iter().filter(|d| d.is_finite()).count();
        view_stats[vi].claimed_pixels = claimed;
        claimed_total += claimed;
        mask_total += view_stats[vi].mask_pixels;
    }
    let coverage = claimed_total as f64 / mask_total.max(1) as f64;

    let gt_shape = {
        let p = session_dir.join("gt_shape.txt");
        if p.exists() {
            read_gt_shape(&p).ok()
        } else {
            None
        }
    };

    if stop_after == Some(Stage::Propagate) {
        return finish_report(
            config,
            out,
            artifacts,
            view_stats,
            seeds.len(),
            Some(prop.report),
            prop.points.points.len(),
            coverage,
            None,
            None,
            None,
            subdivided,
            cells_grid,
            seeds.len(),
        );
    }

    // Stage: fuse.
    let extent = {
        let mut lo = Point3::new(f64::MAX, f64::MAX, f64::MAX);
        let mut hi = Point3::new(f64::MIN, f64::MIN, f64::MIN);
        for p in &prop.points.points {
            for k in 0..3 {
                lo[k] = lo[k].min(p.position[k]);
                hi[k] = hi[k].max(p.position[k]);
            }
        }
        (hi.x - lo.x).max(hi.y - lo.y).max(hi.z - lo.z)
    };
    let voxel = (config.surface.voxel_rel * extent).max(1e-9);
    let fused = fuse_points(&prop.points, voxel, &FuseOptions::default())
        .map_err(|e| stage_err(Stage::Fuse.name(), e, &artifacts))?;
    let fused_path = out.join("mesh_fused.ply");
    ply::write_mesh(&fused_path, &fused, true, &[])
        .map_err(|e| stage_err(Stage::Fuse.name(), e, &artifacts))?;
    artifacts.insert("mesh_fused".into(), fused_path.display().to_string());
    let fused_err = gt_shape
        .as_ref()
        .and_then(|s| shape_error(&fused, &GtSurface::Analytic(s)).ok())
        .map(|(stats, _)| stats);

    if stop_after == Some(Stage::Fuse) {
        return finish_report(
            config,
            out,
            artifacts,
            view_stats,
            seeds.len(),
            Some(prop.report),
            prop.points.points.len(),
            coverage,
            fused_err,
            None,
            None,
            subdivided,
            cells_grid,
            seeds.len(),
        );
    }

    // Stage: refine.
    let final_mesh = if config.surface.refine {
        let refined = refine(&fused, &prop.points, config.surface.lambda)
            .map_err(|e| stage_err(Stage::Refine.name(), e, &artifacts))?;
        let path = out.join("mesh_refined.ply");
        ply::write_mesh(&path, &refined, true, &[])
            .map_err(|e| stage_err(Stage::Refine.name(), e, &artifacts))?;
        ply::write_obj(&out.join("mesh_refined.obj"), &refined)
            .map_err(|e| stage_err(Stage::Refine.name(), e, &artifacts))?;
        artifacts.insert("mesh_refined".into(), path.display().to_string());
        refined
    } else {
        fused.clone()
    };
    let refined_err = gt_shape
        .as_ref()
        .and_then(|s| shape_error(&final_mesh, &GtSurface::Analytic(s)).ok());
    if let (Some(shape), Some((_, dists))) = (&gt_shape, &refined_err) {
        let _ = shape;
        let path = out.join("mesh_error.ply");
        let _ = ply::write_mesh(&path, &final_mesh, true, &[("error", dists)]);
        artifacts.insert("mesh_error".into(), path.display().to_string());
    }
    let refined_stats = refined_err.map(|(stats, _)| stats);

    if stop_after == Some(Stage::Refine) || !config.reflectance.enable {
        return finish_report(
            config,
            out,
            artifacts,
            view_stats,
            seeds.len(),
            Some(prop.report),
            prop.points.points.len(),
            coverage,
            fused_err,
            refined_stats,
            None,
            subdivided,
            cells_grid,
            seeds.len(),
        );
    }

    // Stage: BRDF fit + re-render.
    let (svbrdf, rerender) = brdf_stage(config, &session, &normalized, &prop.points, &final_mesh, out, &mut artifacts)
        .map_err(|e| stage_err(Stage::Brdf.name(), e, &artifacts))?;
    let _ = svbrdf;

    finish_report(
        config,
        out,
        artifacts,
        view_stats,
        seeds.len(),
        Some(prop.report),
        prop.points.points.len(),
        coverage,
        fused_err,
        refined_stats,
        Some(rerender),
        subdivided,
        cells_grid,
        seeds.len(),
    )
}

/// The light model used for observation gathering and re-rendering: unit
/// directions toward the light plus the lighting intensity at the point.
fn light_closure<'a>(
    session: &'a CaptureSession,
    use_volume: bool,
) -> impl Fn(usize, usize, &Point3<f64>) -> Option<(Vector3<f64>, f64)> + Sync + 'a {
    let leds_cam = session.rig.led_positions();
    move |view: usize, led: usize, p_world: &Point3<f64>| {
        let v = &session.views[view];
        if let Some(dirs) = &v.light_dirs {
            let d = v.camera.rotation.inverse() * dirs[led];
            let intensity = v
                .light_intensities
                .as_ref()
                .map(|s| s[led])
                .unwrap_or(1.0);
            return Some((d, intensity));
        }
        match session.rig.mode {
            RigMode::DistantDirectional => {
                let d = v.camera.rotation.inverse() * session.rig.nominal_direction(led);
                Some((d, 1.0))
            }
            RigMode::NearPoint => {
                let p_cam = v.camera.world_to_camera(p_world);
                let led_cam = leds_cam[led];
                let diff = led_cam - p_cam;
                let dist = diff.norm();
                if dist < 1e-9 {
                    return None;
                }
                let d_world = v.camera.rotation.inverse() * (diff / dist);
                let intensity = if use_volume {
                    session
                        .volume
                        .as_ref()
                        .map(|vol| vol.query(led, &p_cam))
                        .unwrap_or_else(|| session.rig.intensity_at(&led_cam, &p_cam))
                } else {
                    session.rig.intensity_at(&led_cam, &p_cam)
                };
                if intensity <= 0.0 {
                    None
                } else {
                    Some((d_world, intensity))
                }
            }
        }
    }
}

fn brdf_stage(
    config: &PipelineConfig,
    session: &CaptureSession,
    normalized: &[Vec<Grid<f32>>],
    points: &crate::propagate::OrientedPointSet,
    mesh: &TriangleMesh,
    out: &Path,
    artifacts: &mut BTreeMap<String, String>,
) -> Result<(Svbrdf, RerenderStats), String> {
    // Per-vertex normal spread from the nearest reconstructed point.
    let spreads = nearest_point_spreads(mesh, points);

    // The observation matrix consumes raw (pre-normalization) images; the
    // light closure supplies V so observations become I/(V·n·l).
    let views: Vec<ObsView> = session
        .views
        .iter()
        .map(|v| ObsView {
            camera: &v.camera,
            images: &v.images,
            mask: &v.mask,
        })
        .collect();
    let use_volume = config.normalize.enable;
    let lights = light_closure(session, use_volume);
    let obs = build_observation_matrix(
        mesh,
        &views,
        &lights,
        &ObservationOptions {
            max_view_angle_deg: config.reflectance.max_view_angle_deg,
            occlusion_tol_rel: 2e-2,
        },
    )
    .map_err(|e| e.to_string())?;

    let fit = fit_svbrdf(
        &obs,
        &spreads,
        &FitOptions {
            k: config.reflectance.k,
            precise_spread_deg: config.reflectance.precise_spread_deg,
            acls: config.reflectance.acls_options(config.seed),
        },
    )
    .map_err(|e| e.to_string())?;

    let svbrdf_path = out.join("svbrdf.bin");
    write_svbrdf(&svbrdf_path, &fit).map_err(|e| e.to_string())?;
    artifacts.insert("svbrdf".into(), svbrdf_path.display().to_string());

    // Weight visualization mesh: normalized per-basis weights.
    let k = fit.k;
    let mut weight_props: Vec<Vec<f64>> = vec![Vec::with_capacity(mesh.vertices.len()); k];
    for i in 0..mesh.vertices.len() {
        let total: f64 = (0..k).map(|kk| fit.weights[i * k + kk]).sum();
        for kk in 0..k {
            let w = if total > 1e-12 {
                fit.weights[i * k + kk] / total
            } else {
                0.0
            };
            weight_props[kk].push(w);
        }
    }
    let names: Vec<String> = (0..k).map(|kk| format!("weight_{kk}")).collect();
    let extra: Vec<(&str, &[f64])> = names
        .iter()
        .zip(weight_props.iter())
        .map(|(n, v)| (n.as_str(), v.as_slice()))
        .collect();
    let weights_path = out.join("mesh_weights.ply");
    ply::write_mesh(&weights_path, mesh, true, &extra).map_err(|e| e.to_string())?;
    artifacts.insert("mesh_weights".into(), weights_path.display().to_string());

    // Re-render every input view and measure the relative RMSE against the
    // (normalization-adjusted) inputs.
    let lights2 = light_closure(session, use_volume);
    let mut per_view = Vec::with_capacity(session.views.len());
    for (vi, view) in session.views.iter().enumerate() {
        let per_led =
            |led: usize, p: &Point3<f64>| -> Option<(Vector3<f64>, f64)> { lights2(vi, led, p) };
        let (stack, _flagged) = render_svbrdf(mesh, &fit, &view.camera, view.images.len(), &per_led);
        if vi == 0 {
            let path = out.join("rerender_000_000.pfm");
            let _ = pfm::write_gray(&path, &stack[0]);
            artifacts.insert("rerender_sample".into(), path.display().to_string());
        }
        let mut num = 0.0f64;
        let mut den = 0.0f64;
        for (li, img) in view.images.iter().enumerate() {
            for y in 0..img.height() {
                for x in 0..img.width() {
                    if !view.mask.get(x, y) {
                        continue;
                    }
                    let truth = img.get(x, y) as f64;
                    let got = stack[li].get(x, y) as f64;
                    if !truth.is_finite() || !got.is_finite() {
                        continue;
                    }
                    num += (got - truth).powi(2);
                    den += truth.powi(2);
                }
            }
        }
        per_view.push((num / den.max(1e-300)).sqrt());
    }
    let _ = normalized;
    let mean = crate::math::mean(&per_view);
    Ok((
        fit,
        RerenderStats {
            per_view_relative_rmse: per_view,
            mean_relative_rmse: mean,
        },
    ))
}

/// Per-vertex normal-consistency spread from the nearest reconstructed
/// point.
pub fn nearest_point_spreads(mesh: &TriangleMesh, points: &crate::propagate::OrientedPointSet) -> Vec<f64> {
    if points.points.is_empty() {
        return vec![f64::INFINITY; mesh.vertices.len()];
    }
    let mut lo = Point3::new(f64::MAX, f64::MAX, f64::MAX);
    let mut hi = Point3::new(f64::MIN, f64::MIN, f64::MIN);
    for p in &points.points {
        for k in 0..3 {
            lo[k] = lo[k].min(p.position[k]);
            hi[k] = hi[k].max(p.position[k]);
        }
    }
    let cell = ((hi - lo).norm() / (points.points.len() as f64).cbrt().max(4.0)).max(1e-9);
    let key_of = |p: &Point3<f64>| {
        (
            ((p.x - lo.x) / cell).floor() as i64,
            ((p.y - lo.y) / cell).floor() as i64,
            ((p.z - lo.z) / cell).floor() as i64,
        )
    };
    let mut hash: std::collections::HashMap<(i64, i64, i64), Vec<u32>> =
        std::collections::HashMap::new();
    for (pi, p) in points.points.iter().enumerate() {
        hash.entry(key_of(&p.position)).or_default().push(pi as u32);
    }
    mesh.vertices
        .iter()
        .map(|v| {
            let (kx, ky, kz) = key_of(v);
            let mut best = (f64::MAX, f64::INFINITY);
            for ring in 0..32i64 {
                for dz in -ring..=ring {
                    for dy in -ring..=ring {
                        for dx in -ring..=ring {
                            if dx.abs().max(dy.abs()).max(dz.abs()) != ring {
                                continue;
                            }
                            if let Some(list) = hash.get(&(kx + dx, ky + dy, kz + dz)) {
                                for &pi in list {
                                    let p = &points.points[pi as usize];
                                    let d = (p.position - v).norm_squared();
                                    if d < best.0 {
                                        best = (d, p.spread_deg);
                                    }
                                }
                            }
                        }
                    }
                }
                if best.0.is_finite() && best.0.sqrt() < ring as f64 * cell {
                    break;
                }
            }
            best.1
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn finish_report(
    config: &PipelineConfig,
    out: &Path,
    artifacts: BTreeMap<String, String>,
    views: Vec<ViewStats>,
    _seed_count: usize,
    propagation: Option<PropagationReport>,
    point_count: usize,
    coverage: f64,
    fused_shape_error: Option<ShapeErrorStats>,
    refined_shape_error: Option<ShapeErrorStats>,
    rerender: Option<RerenderStats>,
    subdivided: bool,
    cells: (usize, usize),
    seeds_loaded: usize,
) -> Result<ReconstructionReport, StageError> {
    let report = ReconstructionReport {
        config_toml: config.to_toml(),
        subdivided,
        cells,
        views,
        seeds_loaded,
        propagation,
        point_count,
        coverage,
        fused_shape_error,
        refined_shape_error,
        rerender,
        artifacts: artifacts.clone(),
    };
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| stage_err("report", e, &artifacts))?;
    std::fs::write(out.join("report.json"), json)
        .map_err(|e| stage_err("report", e, &artifacts))?;
    Ok(report)
}

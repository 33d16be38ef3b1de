//! Synthetic capture-session generation: renders the configured analytic
//! scene from a ring of viewpoints and writes a complete session directory
//! with ground-truth maps, seeds and the shape descriptor.

use std::path::Path;

use nalgebra::{Point2, Point3, UnitQuaternion, Vector3};

use crate::camera::CameraModel;
use crate::io::pfm;
use crate::lightrig::{LightRig, RigMode};
use crate::synth::{
    render_stack, seed_points, AnalyticShape, GroundTruth, RenderOptions, SyntheticBrdf,
};

use super::config::{PipelineConfig, SynthConfig};
use super::session::{save_session, CaptureSession, SessionError, View};
use super::stages::write_gt_shape;

pub struct SynthOutput {
    pub session: CaptureSession,
    pub ground_truth: Vec<GroundTruth>,
    pub shape: AnalyticShape,
    pub seeds: Vec<Point3<f64>>,
}

pub fn shape_from_config(cfg: &SynthConfig) -> Result<AnalyticShape, String> {
    let d = cfg.diameter;
    Ok(match cfg.shape.as_str() {
        "sphere" => AnalyticShape::sphere(Point3::origin(), d / 2.0),
        "torus" => AnalyticShape::torus(
            Point3::origin(),
            d / 2.0 * 0.72,
            d / 2.0 * 0.28,
            // Tilt the ring axis so every turntable view sees the hole
            // obliquely rather than edge-on.
            UnitQuaternion::from_euler_angles(0.9, 0.15, 0.0),
        ),
        "cylinder" => AnalyticShape::cylinder(
            Point3::origin(),
            d / 2.0,
            UnitQuaternion::from_euler_angles(std::f64::consts::FRAC_PI_2, 0.0, 0.15),
        ),
        "plane" => AnalyticShape::plane(
            Point3::origin(),
            UnitQuaternion::from_euler_angles(0.3, 0.2, 0.0),
        ),
        other => return Err(format!("unknown synth shape {other}")),
    })
}

pub fn brdf_from_config(cfg: &SynthConfig) -> Result<SyntheticBrdf, String> {
    Ok(match cfg.brdf.as_str() {
        "lambertian" => SyntheticBrdf::Lambertian { albedo: 0.8 },
        "blinn" => SyntheticBrdf::Blinn {
            diffuse: 0.6,
            specular: 0.4,
            exponent: 20.0,
        },
        "two_material" => {
            SyntheticBrdf::two_material(Point3::origin(), Vector3::new(1.0, 0.3, 0.2), cfg.diameter * 0.12)
        }
        other => return Err(format!("unknown synth brdf {other}")),
    })
}

pub fn rig_from_config(cfg: &SynthConfig) -> Result<LightRig, String> {
    let mode = match cfg.light_mode.as_str() {
        "distant_directional" => RigMode::DistantDirectional,
        "near_point" => RigMode::NearPoint,
        other => return Err(format!("unknown light mode {other}")),
    };
    if cfg.rings.is_empty() {
        return Err("synth.rings must not be empty".into());
    }
    let mut rig = LightRig {
        mode,
        circles: cfg
            .rings
            .iter()
            .map(|&(radius, count, theta0)| crate::lightrig::Circle {
                radius,
                count,
                theta0,
            })
            .collect(),
        pose: nalgebra::Isometry3::identity(),
        emission_exponent: cfg.emission_exponent,
        reference_depth: cfg.distance,
        explicit: None,
    };
    if rig.led_count() == 0 {
        return Err("light rig has no LEDs".into());
    }
    rig.reference_depth = cfg.distance;
    Ok(rig)
}

/// Cameras on a turntable ring around the object at the configured
/// elevation, all looking at the origin.
pub fn cameras_from_config(cfg: &SynthConfig) -> Result<Vec<CameraModel>, String> {
    let res = cfg.resolution;
    let principal = Point2::new((res as f64 - 1.0) / 2.0, (res as f64 - 1.0) / 2.0);
    let elev = cfg.view_elevation_deg.to_radians();
    let mut cams = Vec::with_capacity(cfg.views);
    for vi in 0..cfg.views {
        let angle = std::f64::consts::TAU * vi as f64 / cfg.views as f64;
        let eye = Point3::new(
            cfg.distance * elev.cos() * angle.sin(),
            -cfg.distance * elev.sin(),
            -cfg.distance * elev.cos() * angle.cos(),
        );
        let cam = match cfg.camera.as_str() {
            "orthographic" => {
                // Frame the object with ~10% margin.
                let scale = res as f64 / (cfg.diameter * 1.2);
                CameraModel::orthographic(scale, principal, nalgebra::Rotation3::identity(), Vector3::zeros(), res, res)
            }
            "perspective" => {
                let f = res as f64 / (2.0 * (cfg.fov_deg.to_radians() / 2.0).tan());
                CameraModel::perspective(f, f, principal, nalgebra::Rotation3::identity(), Vector3::zeros(), res, res)
            }
            other => return Err(format!("unknown camera kind {other}")),
        };
        cams.push(cam.look_at(eye, Point3::origin(), Vector3::y()));
    }
    Ok(cams)
}

/// Render the configured scene and return the in-memory session plus ground
/// truth.
pub fn synthesize(config: &PipelineConfig) -> Result<SynthOutput, String> {
    let cfg = &config.synth;
    let shape = shape_from_config(cfg)?;
    let brdf = brdf_from_config(cfg)?;
    let rig = rig_from_config(cfg)?;
    let cameras = cameras_from_config(cfg)?;
    let options = RenderOptions {
        shadows: cfg.shadows,
        noise_sigma: cfg.noise_sigma,
        rng_seed: config.seed,
    };
    let mut views = Vec::with_capacity(cameras.len());
    let mut gts = Vec::with_capacity(cameras.len());
    for camera in cameras {
        let (stack, gt) = render_stack(&shape, &brdf, &camera, &rig, &options)
            .map_err(|e| e.to_string())?;
        views.push(View {
            camera,
            median: super::session::median_image(&stack),
            images: stack,
            mask: gt.mask.clone(),
            light_dirs: None,
            light_intensities: None,
        });
        gts.push(gt);
    }
    let session = CaptureSession {
        views,
        rig,
        volume: None,
        units_per_mm: 1.0,
    };
    let gt_pairs: Vec<(CameraModel, GroundTruth)> = session
        .views
        .iter()
        .zip(gts.iter())
        .map(|(v, g)| (v.camera.clone(), g.clone()))
        .collect();
    let seeds = seed_points(
        &gt_pairs,
        cfg.seed_count,
        cfg.seed_jitter_rel * cfg.diameter,
        config.seed,
    )
    .map_err(|e| e.to_string())?;
    Ok(SynthOutput {
        session,
        ground_truth: gts,
        shape,
        seeds,
    })
}

/// Render and write a complete session directory.
pub fn synthesize_to_dir(config: &PipelineConfig, dir: &Path) -> Result<SynthOutput, String> {
    let out = synthesize(config)?;
    write_synth_output(&out, dir).map_err(|e| e.to_string())?;
    Ok(out)
}

pub fn write_synth_output(out: &SynthOutput, dir: &Path) -> Result<(), SessionError> {
    save_session(dir, &out.session)?;
    for (vi, gt) in out.ground_truth.iter().enumerate() {
        let (depth_p, normal_p, azimuth_p) = super::session::gt_paths(dir, vi);
        pfm::write_gray(&depth_p, &gt.depth.map(|v| v as f32))?;
        let normal_rgb = crate::img::Grid::from_fn(gt.normal.width(), gt.normal.height(), |x, y| {
            let n = gt.normal.get(x, y);
            [n[0] as f32, n[1] as f32, n[2] as f32]
        });
        pfm::write_rgb(&normal_p, &normal_rgb)?;
        pfm::write_gray(&azimuth_p, &gt.azimuth.map(|v| v as f32))?;
    }
    crate::synth::write_seeds_txt(&dir.join("seeds.txt"), &out.seeds).map_err(|e| {
        SessionError::Unreadable {
            path: dir.join("seeds.txt").display().to_string(),
            msg: e.to_string(),
        }
    })?;
    write_gt_shape(&dir.join("gt_shape.txt"), &out.shape).map_err(|e| SessionError::Unreadable {
        path: dir.join("gt_shape.txt").display().to_string(),
        msg: e.to_string(),
    })?;
    Ok(())
}

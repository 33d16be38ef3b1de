//! Pipeline configuration: one TOML file carrying every tunable, fully
//! defaulted, with unknown keys rejected.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::azimuth::AzimuthOptions;
use crate::contour::TraceOptions;
use crate::propagate::PropagationConfig;
use crate::reflectance::AclsOptions;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {msg}")]
    Io { path: String, msg: String },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("config validation: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SessionConfig {
    pub dir: String,
    /// "linear" or "srgb" decode for 8/16-bit PNG inputs.
    pub gamma: String,
    pub units_per_mm: f64,
    /// Seeds file (x y z [reprojection_error]); defaults to seeds.txt in the
    /// session directory.
    pub seeds: Option<String>,
    /// Drop seeds whose reprojection-error column exceeds this.
    pub max_seed_reprojection_px: f64,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            dir: "session".into(),
            gamma: "linear".into(),
            units_per_mm: 1.0,
            seeds: None,
            max_seed_reprojection_px: 0.5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// sphere | torus | cylinder | plane
    pub shape: String,
    pub diameter: f64,
    /// Object center distance from the camera.
    pub distance: f64,
    pub views: usize,
    pub resolution: usize,
    /// orthographic | perspective
    pub camera: String,
    /// Horizontal field of view for perspective cameras, degrees.
    pub fov_deg: f64,
    /// distant_directional | near_point
    pub light_mode: String,
    /// (radius, count, theta0) of the LED rings.
    pub rings: Vec<(f64, usize, f64)>,
    pub emission_exponent: f64,
    /// lambertian | blinn | two_material
    pub brdf: String,
    pub noise_sigma: f64,
    pub shadows: bool,
    pub seed_count: usize,
    /// Seed jitter, fraction of the diameter.
    pub seed_jitter_rel: f64,
    /// Camera ring elevation above the object equator, degrees.
    pub view_elevation_deg: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            shape: "sphere".into(),
            diameter: 100.0,
            distance: 400.0,
            views: 20,
            resolution: 128,
            camera: "orthographic".into(),
            fov_deg: 20.0,
            light_mode: "distant_directional".into(),
            rings: vec![(300.0, 32, 0.0)],
            emission_exponent: 0.0,
            brdf: "blinn".into(),
            noise_sigma: 0.0,
            shadows: false,
            seed_count: 200,
            seed_jitter_rel: 0.001,
            view_elevation_deg: 12.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AzimuthConfig {
    pub fourier_order: usize,
    pub energy_rel_std: f64,
    pub trim: bool,
    pub trim_residual_factor: f64,
    pub trim_fraction: f64,
    /// Force view-centered-circle resampling even for circle rigs.
    pub force_resample: bool,
}

impl Default for AzimuthConfig {
    fn default() -> Self {
        let o = AzimuthOptions::default();
        Self {
            fourier_order: o.fourier_order,
            energy_rel_std: o.min_rel_std,
            trim: o.trim,
            trim_residual_factor: o.trim_residual_factor,
            trim_fraction: o.trim_fraction,
            force_resample: false,
        }
    }
}

impl AzimuthConfig {
    pub fn options(&self) -> AzimuthOptions {
        AzimuthOptions {
            fourier_order: self.fourier_order,
            min_rel_std: self.energy_rel_std,
            trim: self.trim,
            trim_residual_factor: self.trim_residual_factor,
            trim_fraction: self.trim_fraction,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SubdivisionConfig {
    /// Subdivide automatically when the FoV exceeds the threshold.
    pub auto: bool,
    pub rows: usize,
    pub cols: usize,
    /// Overlap margin per side, fraction of the cell size.
    pub margin: f64,
    /// The orthographic shortcut is safe below this FoV (degrees).
    pub fov_threshold_deg: f64,
    /// Force subdivision on/off regardless of FoV.
    pub force: Option<bool>,
}

impl Default for SubdivisionConfig {
    fn default() -> Self {
        Self {
            auto: true,
            rows: 3,
            cols: 3,
            margin: 0.1,
            fov_threshold_deg: 10.0,
            force: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ContourConfig {
    pub step: f64,
    pub max_steps: usize,
    pub grad_threshold: f64,
    pub intensity_floor: f64,
    pub seed_stride: usize,
    pub coverage_drop: f64,
    pub coverage_radius: f64,
}

impl Default for ContourConfig {
    fn default() -> Self {
        let o = TraceOptions::default();
        Self {
            step: o.step,
            max_steps: o.max_steps,
            grad_threshold: o.grad_threshold,
            intensity_floor: o.intensity_floor,
            seed_stride: o.seed_stride,
            coverage_drop: o.coverage_drop,
            coverage_radius: o.coverage_radius,
        }
    }
}

impl ContourConfig {
    pub fn options(&self) -> TraceOptions {
        TraceOptions {
            step: self.step,
            max_steps: self.max_steps,
            grad_threshold: self.grad_threshold,
            intensity_floor: self.intensity_floor,
            seed_stride: self.seed_stride,
            coverage_drop: self.coverage_drop,
            coverage_radius: self.coverage_radius,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SurfaceConfig {
    /// Voxel size as a fraction of the object diameter.
    pub voxel_rel: f64,
    pub lambda: f64,
    pub refine: bool,
}

impl Default for SurfaceConfig {
    fn default() -> Self {
        Self {
            voxel_rel: 1.0 / 128.0,
            lambda: 0.1,
            refine: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ReflectanceConfig {
    pub enable: bool,
    pub k: usize,
    pub max_view_angle_deg: f64,
    pub precise_spread_deg: f64,
    pub acls_iterations: usize,
    pub acls_tol: f64,
    /// θ_h second-difference smoothness weight on the basis (0 = off).
    pub smoothness: f64,
}

impl Default for ReflectanceConfig {
    fn default() -> Self {
        Self {
            enable: true,
            k: 2,
            max_view_angle_deg: 40.0,
            precise_spread_deg: 1.5,
            acls_iterations: 120,
            acls_tol: 1e-9,
            smoothness: 1e-3,
        }
    }
}

impl ReflectanceConfig {
    pub fn acls_options(&self, seed: u64) -> AclsOptions {
        AclsOptions {
            iterations: self.acls_iterations,
            tol: self.acls_tol,
            seed,
            smoothness: self.smoothness,
            brdf_layout: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct NormalizeConfig {
    /// Apply intensity-volume normalization (near mode).
    pub enable: bool,
    /// Collapse the volume to one mean intensity per LED (far setups).
    pub mean_intensity_only: bool,
    /// Resample observations onto a view-centered circle in near mode.
    pub resample: bool,
}

impl Default for NormalizeConfig {
    fn default() -> Self {
        Self {
            enable: true,
            mean_intensity_only: false,
            resample: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    /// 0 = rayon default.
    pub threads: usize,
    pub stop_after: Option<String>,
    pub cache: bool,
    pub session: SessionConfig,
    pub synth: SynthConfig,
    pub azimuth: AzimuthConfig,
    pub subdivision: SubdivisionConfig,
    pub contour: ContourConfig,
    pub propagate: PropagationConfig,
    pub surface: SurfaceConfig,
    pub reflectance: ReflectanceConfig,
    pub normalize: NormalizeConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            threads: 0,
            stop_after: None,
            cache: true,
            session: SessionConfig::default(),
            synth: SynthConfig::default(),
            azimuth: AzimuthConfig::default(),
            subdivision: SubdivisionConfig::default(),
            contour: ContourConfig::default(),
            propagate: PropagationConfig::default(),
            surface: SurfaceConfig::default(),
            reflectance: ReflectanceConfig::default(),
            normalize: NormalizeConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let config: PipelineConfig =
            toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.session.gamma != "linear" && self.session.gamma != "srgb" {
            return Err(ConfigError::Invalid(format!(
                "session.gamma must be linear or srgb, got {}",
                self.session.gamma
            )));
        }
        if self.propagate.t0_deg > self.propagate.t_max_deg {
            return Err(ConfigError::Invalid(
                "propagate.t0_deg must not exceed propagate.t_max_deg".into(),
            ));
        }
        if !(self.propagate.selection_fraction > 0.0 && self.propagate.selection_fraction <= 1.0) {
            return Err(ConfigError::Invalid(
                "propagate.selection_fraction must be in (0, 1]".into(),
            ));
        }
        if let Some(stage) = &self.stop_after {
            super::stages::Stage::parse(stage).map_err(|e| ConfigError::Invalid(e))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_and_round_trip() {
        let config = PipelineConfig::default();
        let text = config.to_toml();
        let back = PipelineConfig::parse(&text).unwrap();
        assert_eq!(config, back);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = PipelineConfig::parse("definitely_not_a_key = 3").unwrap_err();
        assert!(matches!(err, ConfigError::Parse(_)));
        let err = PipelineConfig::parse("[azimuth]\nbogus = 1").unwrap_err();
        assert!(matches!(err, ConfigError::Parse(_)));
    }

    #[test]
    fn partial_configs_pick_up_defaults() {
        let config = PipelineConfig::parse("seed = 7\n[propagate]\nt0_deg = 2.0").unwrap();
        assert_eq!(config.seed, 7);
        assert_eq!(config.propagate.t0_deg, 2.0);
        assert_eq!(config.propagate.t_max_deg, 15.0);
        assert_eq!(config.azimuth.fourier_order, 2);
    }

    #[test]
    fn bad_schedule_is_invalid() {
        let err = PipelineConfig::parse("[propagate]\nt0_deg = 99.0").unwrap_err();
        assert!(matches!(err, ConfigError::Invalid(_)));
    }
}

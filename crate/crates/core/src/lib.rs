//! Multi-view photometric stereo for spatially varying isotropic materials.
//!
//! The library reconstructs a complete 3D shape and a tabulated isotropic
//! SVBRDF from photometric-stereo image stacks captured from multiple
//! viewpoints under a circular LED rig. The stages are:
//!
//! 1. **synth** – synthetic scene oracle: analytic shapes rendered under the
//!    same rig model, with exact ground-truth depth/normal/azimuth maps.
//! 2. **camera** – projection models and the perspective-to-orthographic
//!    cell subdivision (minimal-rotation virtual cameras + homography warps).
//! 3. **lightrig** – LED ring geometry, θ₀ and intensity-volume calibration,
//!    per-pixel light directions, normalization, view-centered-circle
//!    resampling.
//! 4. **azimuth** – per-pixel azimuth of the surface normal from the symmetry
//!    of the intensity profile over a view-centered light circle.
//! 5. **contour** – sub-pixel iso-depth contour tracing perpendicular to the
//!    azimuth directions, with curvature-based confidence.
//! 6. **propagate** – confidence-sorted multi-view depth propagation along
//!    contours with azimuth-consistency checking.
//! 7. **surface** – oriented-point fusion into a watertight mesh and
//!    position/normal least-squares refinement.
//! 8. **reflectance** – Rusinkiewicz-parameterized BRDF tables, observation
//!    matrix with missing data, ACLS factorization, re-rendering.
//! 9. **pipeline** – session I/O, configuration, stage orchestration and
//!    evaluation reports.

pub mod azimuth;
pub mod camera;
pub mod contour;
pub mod img;
pub mod io;
pub mod lightrig;
pub mod math;
pub mod pipeline;
pub mod propagate;
pub mod reflectance;
pub mod surface;
pub mod synth;

pub use camera::CameraModel;
pub use img::Grid;
pub use propagate::{OrientedPoint, OrientedPointSet};
pub use surface::TriangleMesh;

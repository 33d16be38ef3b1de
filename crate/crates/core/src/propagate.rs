//! Multi-view depth propagation along iso-depth contours.
//!
//! Sparse 3D seeds are projected into every view where they are visible; the
//! depth of a seed is assigned to all pixels of the iso-depth contour through
//! its projection, each assignment validated by an azimuth-consistency check
//! across the most front-parallel views. Accepted pixels become new 3D
//! points that propagate in other views in turn. Points are processed in
//! confidence order, half per iteration, and the consistency threshold T is
//! relaxed by 1.3× whenever an iteration produces nothing, until it exceeds
//! 15°.

use nalgebra::{Matrix3, Point2, Point3, Rotation3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{apply_homography, CameraModel};
use crate::contour::IsoDepthContour;
use crate::img::{bilinear_mod_pi, Grid};
use crate::math::fold_mod_pi;

#[derive(Debug, Error)]
pub enum PropagateError {
    #[error("no iso-depth contour passes within {radius} px of any seed projection")]
    NoSeedContours { radius: f64 },
    #[error("propagation needs at least one seed")]
    NoSeeds,
}

/// World-frame axes of an estimation frame (camera or orthographic cell).
#[derive(Debug, Clone, Copy)]
pub struct Frame3 {
    pub x: Vector3<f64>,
    pub y: Vector3<f64>,
    pub z: Vector3<f64>,
}

/// Normal of the plane that must contain the surface normal, given the
/// azimuth angle seen in a frame: `m = cos θ · y − sin θ · x`.
pub fn azimuth_plane_normal(frame: &Frame3, theta: f64) -> Vector3<f64> {
    frame.y * theta.cos() - frame.x * theta.sin()
}

/// Azimuth angle (mod π) that a normal plane with world normal `m` induces
/// in another frame: the direction of the plane's trace in that frame's
/// image plane. NaN when the plane is parallel to the frame's axis.
pub fn azimuth_in_frame(m: &Vector3<f64>, frame: &Frame3) -> f64 {
    let v = m.cross(&frame.z);
    let px = v.dot(&frame.x);
    let py = v.dot(&frame.y);
    if px * px + py * py < 1e-20 {
        return f64::NAN;
    }
    fold_mod_pi(py.atan2(px))
}

/// Intersect two azimuth planes into a 3D normal direction. None when the
/// planes are within 1° of parallel. The sign faces the two cameras:
/// `n·z_i + n·z_j ≤ 0`.
pub fn normal_from_azimuth_pair(
    frame_i: &Frame3,
    theta_i: f64,
    frame_j: &Frame3,
    theta_j: f64,
) -> Option<Vector3<f64>> {
    let m_i = azimuth_plane_normal(frame_i, theta_i);
    let m_j = azimuth_plane_normal(frame_j, theta_j);
    let cross = m_i.cross(&m_j);
    let s = cross.norm();
    if s <= 1.0f64.to_radians().sin() {
        return None;
    }
    let mut n = cross / s;
    if n.dot(&(frame_i.z + frame_j.z)) > 0.0 {
        n = -n;
    }
    Some(n)
}

/// Outcome of the multi-view azimuth consistency check.
#[derive(Debug, Clone)]
pub struct ConsistencyOutcome {
    pub consistent: bool,
    pub normal: Option<Vector3<f64>>,
    /// Number of surviving views.
    pub count: usize,
    /// Surviving view ids.
    pub views: Vec<usize>,
    /// Max pairwise angle among the consistent normals, degrees.
    pub spread_deg: f64,
}

impl ConsistencyOutcome {
    fn inconsistent() -> Self {
        Self {
            consistent: false,
            normal: None,
            count: 0,
            views: Vec::new(),
            spread_deg: f64::NAN,
        }
    }
}

/// Check the azimuth consistency of a 3D position across views.
///
/// `probe(view, p)` returns the azimuth at the projection of `p` in that
/// view together with the frame axes, or None when the projection is
/// invalid. Views are discarded greedily — the one leading to the largest
/// number of inconsistent normals first (ties: larger summed conflict angle,
/// then lower view id) — until all pairwise normals agree within `t_deg`
/// degrees or fewer than `min_views` remain.
pub fn consistency_check<P>(
    p: &Point3<f64>,
    candidate_views: &[usize],
    probe: &P,
    t_deg: f64,
    min_views: usize,
) -> ConsistencyOutcome
where
    P: Fn(usize, &Point3<f64>) -> Option<(f64, Frame3)>,
{
    let mut views: Vec<(usize, f64, Frame3)> = candidate_views
        .iter()
        .filter_map(|&v| probe(v, p).map(|(theta, frame)| (v, theta, frame)))
        .collect();
    let t_rad = t_deg.to_radians();
    loop {
        if views.len() < min_views {
            return ConsistencyOutcome::inconsistent();
        }
        // All pairwise plane intersections.
        let mut normals: Vec<(usize, usize, Vector3<f64>)> = Vec::new();
        for a in 0..views.len() {
            for b in (a + 1)..views.len() {
                if let Some(n) = normal_from_azimuth_pair(
                    &views[a].2,
                    views[a].1,
                    &views[b].2,
                    views[b].1,
                ) {
                    normals.push((views[a].0, views[b].0, n));
                }
            }
        }
        if normals.is_empty() {
            return ConsistencyOutcome::inconsistent();
        }
        // Conflicts: normal pairs more than T apart.
        let mut conflicts: Vec<(usize, usize, f64)> = Vec::new();
        let mut max_angle = 0.0f64;
        for a in 0..normals.len() {
            for b in (a + 1)..normals.len() {
                let angle = normals[a]
                    .2
                    .dot(&normals[b].2)
                    .clamp(-1.0, 1.0)
                    .acos();
                max_angle = max_angle.max(angle);
                if angle > t_rad {
                    conflicts.push((a, b, angle));
                }
            }
        }
        if conflicts.is_empty() {
            let mut mean = Vector3::zeros();
            for (_, _, n) in &normals {
                mean += n;
            }
            let norm = mean.norm();
            if norm < 1e-12 {
                return ConsistencyOutcome::inconsistent();
            }
            let mut mean = mean / norm;
            let z_sum: Vector3<f64> = views.iter().map(|(_, _, f)| f.z).sum();
            if mean.dot(&z_sum) > 0.0 {
                mean = -mean;
            }
            return ConsistencyOutcome {
                consistent: true,
                normal: Some(mean),
                count: views.len(),
                views: views.iter().map(|(v, _, _)| *v).collect(),
                spread_deg: max_angle.to_degrees(),
            };
        }
        // Vote a view out.
        let involved = |ni: usize, view: usize| {
            let (va, vb, _) = normals[ni];
            va == view || vb == view
        };
        let mut worst_view = usize::MAX;
        let mut worst_key = (0usize, 0.0f64);
        for &(v, _, _) in &views {
            let mut bad_normals = std::collections::BTreeSet::new();
            let mut angle_sum = 0.0;
            for &(a, b, angle) in &conflicts {
                if involved(a, v) || involved(b, v) {
                    if involved(a, v) {
                        bad_normals.insert(a);
                    }
                    if involved(b, v) {
                        bad_normals.insert(b);
                    }
                    angle_sum += angle;
                }
            }
            let key = (bad_normals.len(), angle_sum);
            let better = key.0 > worst_key.0
                || (key.0 == worst_key.0 && key.1 > worst_key.1)
                || (key.0 == worst_key.0 && key.1 == worst_key.1 && v < worst_view);
            if better {
                worst_key = key;
                worst_view = v;
            }
        }
        views.retain(|(v, _, _)| *v != worst_view);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PropagationConfig {
    pub t0_deg: f64,
    pub relax_factor: f64,
    pub t_max_deg: f64,
    /// L most front-parallel views used by the consistency check.
    pub front_parallel_views: usize,
    /// Surviving contours shorter than this (in pixels) propagate nothing.
    pub min_contour_px: f64,
    pub min_consistent_views: usize,
    /// Fraction of P selected per iteration.
    pub selection_fraction: f64,
    /// Max distance between a projection and a contour point.
    pub snap_radius_px: f64,
    pub max_iterations: usize,
}

impl Default for PropagationConfig {
    fn default() -> Self {
        Self {
            t0_deg: 3.0,
            relax_factor: 1.3,
            t_max_deg: 15.0,
            front_parallel_views: 7,
            min_contour_px: 5.0,
            min_consistent_views: 3,
            selection_fraction: 0.5,
            snap_radius_px: 0.5,
            max_iterations: 1_000_000,
        }
    }
}

/// The T relaxation schedule: `T₀·1.3^k`, stopping before the first value
/// above `T_max`.
pub fn t_schedule(config: &PropagationConfig) -> Vec<f64> {
    let mut out = Vec::new();
    let mut t = config.t0_deg;
    while t <= config.t_max_deg {
        out.push(t);
        t *= config.relax_factor;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Seed,
    Propagated,
}

/// A reconstructed surface point with its oriented normal.
#[derive(Debug, Clone)]
pub struct OrientedPoint {
    pub position: Point3<f64>,
    pub normal: Vector3<f64>,
    /// Number of consistent views.
    pub views: u32,
    /// Confidence of the contour the point came from.
    pub confidence: f64,
    /// Max pairwise angle of its consistent normals, degrees.
    pub spread_deg: f64,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Default)]
pub struct OrientedPointSet {
    pub points: Vec<OrientedPoint>,
}

/// One estimation frame of a view: the whole image (identity cell) or one
/// orthographic cell of a subdivided perspective view.
#[derive(Debug, Clone)]
pub struct PropFrame {
    /// Minimal rotation with `R·Z = Z'` in the parent camera frame; cell
    /// coordinates of a camera-frame point q are `Rᵀq`.
    pub rotation: Rotation3<f64>,
    /// Parent pixels → cell pixels.
    pub homography: Matrix3<f64>,
    pub homography_inv: Matrix3<f64>,
    pub azimuth: Grid<f64>,
}

impl PropFrame {
    pub fn identity(azimuth: Grid<f64>) -> Self {
        Self {
            rotation: Rotation3::identity(),
            homography: Matrix3::identity(),
            homography_inv: Matrix3::identity(),
            azimuth,
        }
    }
}

/// One view prepared for propagation.
pub struct PropView {
    pub camera: CameraModel,
    pub mask: Grid<bool>,
    pub frames: Vec<PropFrame>,
    /// Base (un-margined) cell grid used to assign pixels to frames.
    pub cell_rows: usize,
    pub cell_cols: usize,
    pub contours: Vec<IsoDepthContour>,
}

impl PropView {
    pub fn single_frame(
        camera: CameraModel,
        mask: Grid<bool>,
        azimuth: Grid<f64>,
        contours: Vec<IsoDepthContour>,
    ) -> Self {
        Self {
            camera,
            mask,
            frames: vec![PropFrame::identity(azimuth)],
            cell_rows: 1,
            cell_cols: 1,
            contours,
        }
    }

    /// Frame owning a parent pixel (nearest base cell).
    pub fn frame_of(&self, parent_px: &Point2<f64>) -> usize {
        if self.frames.len() == 1 {
            return 0;
        }
        let base_w = self.camera.width as f64 / self.cell_cols as f64;
        let base_h = self.camera.height as f64 / self.cell_rows as f64;
        let col = ((parent_px.x / base_w).floor() as i64).clamp(0, self.cell_cols as i64 - 1);
        let row = ((parent_px.y / base_h).floor() as i64).clamp(0, self.cell_rows as i64 - 1);
        (row as usize) * self.cell_cols + col as usize
    }

    /// World axes of a frame.
    pub fn frame_axes(&self, frame: usize) -> Frame3 {
        let rot = &self.frames[frame].rotation;
        let ri = self.camera.rotation.inverse();
        Frame3 {
            x: ri * (rot * Vector3::x()),
            y: ri * (rot * Vector3::y()),
            z: ri * (rot * Vector3::z()),
        }
    }

    /// Depth of a world point along a frame's principal axis.
    pub fn frame_depth(&self, frame: usize, p: &Point3<f64>) -> f64 {
        let q = self.camera.world_to_camera(p);
        (self.frames[frame].rotation.inverse() * q.coords).z
    }

    /// Project a world point into a frame's pixel coordinates (via the
    /// parent projection and the cell homography).
    pub fn project_to_frame(&self, frame: usize, p: &Point3<f64>) -> Option<Point2<f64>> {
        let parent = self.camera.project(p).ok()?;
        Some(apply_homography(&self.frames[frame].homography, &parent))
    }

    /// Back-project a frame pixel at a given frame depth: pull the pixel to
    /// the parent image, cast the parent ray and scale it so the coordinate
    /// along the frame's principal axis equals `depth`. Exact for both
    /// camera kinds.
    pub fn backproject_frame(&self, frame: usize, px: &Point2<f64>, depth: f64) -> Option<Point3<f64>> {
        let f = &self.frames[frame];
        let parent = apply_homography(&f.homography_inv, px);
        let rot_inv = f.rotation.inverse();
        let (origin, dir) = match self.camera.intrinsics {
            crate::camera::Intrinsics::Orthographic { .. } => {
                (self.camera.backproject_cam(&parent, 0.0), Vector3::z())
            }
            crate::camera::Intrinsics::Perspective { .. } => {
                (Point3::origin(), self.camera.ray_dir_cam(&parent))
            }
        };
        let z0 = (rot_inv * origin.coords).z;
        let dz = (rot_inv * dir).z;
        if dz.abs() < 1e-12 {
            return None;
        }
        let s = (depth - z0) / dz;
        let cam_point = origin + dir * s;
        Some(self.camera.camera_to_world(&cam_point))
    }

    /// Azimuth (mod π) at the projection of a world point, with the frame
    /// axes, None when outside the mask or invalid. Used as the consistency
    /// probe.
    pub fn azimuth_probe(&self, p: &Point3<f64>) -> Option<(f64, Frame3)> {
        let parent = self.camera.project(p).ok()?;
        let xi = parent.x.round() as i64;
        let yi = parent.y.round() as i64;
        if !self.mask.at(xi, yi) {
            return None;
        }
        let frame = self.frame_of(&parent);
        let px = apply_homography(&self.frames[frame].homography, &parent);
        let theta = bilinear_mod_pi(&self.frames[frame].azimuth, px.x, px.y);
        if theta.is_nan() {
            return None;
        }
        Some((theta, self.frame_axes(frame)))
    }
}

/// Spatial index from frame pixels to contour points.
struct ContourIndex {
    /// (frame, binx, biny) → (contour id, point idx)
    bins: std::collections::HashMap<(usize, i64, i64), Vec<(u32, u32)>>,
}

impl ContourIndex {
    fn build(view: &PropView) -> Self {
        let mut bins: std::collections::HashMap<(usize, i64, i64), Vec<(u32, u32)>> =
            std::collections::HashMap::new();
        for (ci, c) in view.contours.iter().enumerate() {
            let frame = if c.cell < 0 { 0 } else { c.cell as usize };
            for (pi, p) in c.points.iter().enumerate() {
                let key = (frame, p[0].round() as i64, p[1].round() as i64);
                bins.entry(key).or_default().push((ci as u32, pi as u32));
            }
        }
        Self { bins }
    }

    /// Closest contour point within `radius` of a frame-pixel position.
    fn nearest(
        &self,
        view: &PropView,
        frame: usize,
        px: &Point2<f64>,
        radius: f64,
    ) -> Option<(usize, usize)> {
        let bx = px.x.round() as i64;
        let by = px.y.round() as i64;
        let mut best = (radius * radius, None);
        for dx in -1..=1 {
            for dy in -1..=1 {
                if let Some(list) = self.bins.get(&(frame, bx + dx, by + dy)) {
                    for &(ci, pi) in list {
                        let p = view.contours[ci as usize].points[pi as usize];
                        let d2 = (p[0] - px.x).powi(2) + (p[1] - px.y).powi(2);
                        if d2 <= best.0 {
                            best = (d2, Some((ci as usize, pi as usize)));
                        }
                    }
                }
            }
        }
        best.1
    }
}

#[derive(Debug, Clone)]
struct MasterPoint {
    position: Point3<f64>,
    normal: Option<Vector3<f64>>,
    visible_views: Vec<usize>,
    count: usize,
    provenance: Provenance,
}

#[derive(Debug, Clone)]
struct Entry {
    point: usize,
    view: usize,
    contour: usize,
    anchor: usize,
    confidence: f64,
    count: usize,
    creation: u64,
}

/// One accepted pixel claim produced by a walk.
struct Claim {
    view: usize,
    pixel: (usize, usize),
    position: Point3<f64>,
    normal: Vector3<f64>,
    views: Vec<usize>,
    count: usize,
    spread_deg: f64,
    confidence: f64,
    is_anchor: bool,
}

/// Per-iteration statistics for the report.
#[derive(Debug, Clone, Serialize)]
pub struct IterationStats {
    pub t_deg: f64,
    pub selected: usize,
    pub produced: usize,
    pub total_points: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct PropagationReport {
    pub t_trace: Vec<f64>,
    pub iterations: Vec<IterationStats>,
    pub seeds_with_contours: usize,
}

pub struct PropagationOutput {
    pub points: OrientedPointSet,
    pub report: PropagationReport,
    /// Per-view depth ledgers (parent resolution, NaN = never assigned).
    pub ledgers: Vec<Grid<f64>>,
}

/// Walk one entry's contour from its anchor outward, claiming consistent
/// pixels against a ledger snapshot.
#[allow(clippy::too_many_arguments)]
fn walk_entry(
    entry: &Entry,
    master: &MasterPoint,
    views: &[PropView],
    ledgers: &[Grid<f64>],
    config: &PropagationConfig,
    t_deg: f64,
) -> Vec<Claim> {
    let view = &views[entry.view];
    let contour = &view.contours[entry.contour];
    let frame = if contour.cell < 0 {
        0
    } else {
        contour.cell as usize
    };
    let depth = view.frame_depth(frame, &master.position);

    // L most front-parallel views among the views the source is visible in.
    let n_ref = master.normal.unwrap_or_else(|| {
        let (_, _, z) = view.camera.axes_world();
        -z
    });
    let mut ranked: Vec<(f64, usize)> = master
        .visible_views
        .iter()
        .map(|&v| {
            let (_, _, z) = views[v].camera.axes_world();
            (n_ref.dot(&z), v)
        })
        .collect();
    ranked.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let check_views: Vec<usize> = ranked
        .iter()
        .take(config.front_parallel_views)
        .map(|&(_, v)| v)
        .collect();

    let probe = |v: usize, p: &Point3<f64>| views[v].azimuth_probe(p);

    // Walk both directions from the anchor, pixel by pixel.
    let mut lo_idx = entry.anchor;
    let mut hi_idx = entry.anchor;
    let mut claims: Vec<Claim> = Vec::new();
    let accept = |idx: usize, is_anchor: bool, claims: &mut Vec<Claim>| -> bool {
        let p2 = contour.points[idx];
        // Ledger is parent-resolution; convert the frame pixel.
        let parent = apply_homography(
            &view.frames[frame].homography_inv,
            &Point2::new(p2[0], p2[1]),
        );
        let lx = parent.x.round() as i64;
        let ly = parent.y.round() as i64;
        if !ledgers[entry.view].in_bounds(lx, ly) {
            return false;
        }
        let (lx, ly) = (lx as usize, ly as usize);
        if !view.mask.get(lx, ly) {
            return false;
        }
        // Already-claimed pixels (or ones claimed earlier in this walk) are
        // kept unchanged and skipped.
        if ledgers[entry.view].get(lx, ly).is_finite() {
            return true;
        }
        if claims.iter().any(|c| c.pixel == (lx, ly)) {
            return true;
        }
        let Some(pos) = views[entry.view].backproject_frame(frame, &Point2::new(p2[0], p2[1]), depth)
        else {
            return false;
        };
        let outcome = consistency_check(&pos, &check_views, &probe, t_deg, config.min_consistent_views);
        if !outcome.consistent {
            return false;
        }
        claims.push(Claim {
            view: entry.view,
            pixel: (lx, ly),
            position: pos,
            normal: outcome.normal.unwrap(),
            views: outcome.views,
            count: outcome.count,
            spread_deg: outcome.spread_deg,
            confidence: contour.confidence,
            is_anchor,
        });
        true
    };

    if !accept(entry.anchor, true, &mut claims) {
        return Vec::new();
    }
    // Toward the end (+ side).
    let mut idx = entry.anchor;
    let mut last_pixel = contour.points[entry.anchor].map(|v| v.round() as i64);
    while idx + 1 < contour.points.len() {
        idx += 1;
        let p = contour.points[idx].map(|v| v.round() as i64);
        if p == last_pixel {
            hi_idx = idx;
            continue;
        }
        if !accept(idx, false, &mut claims) {
            break;
        }
        last_pixel = p;
        hi_idx = idx;
    }
    // Toward the start (− side).
    let mut idx = entry.anchor;
    let mut last_pixel = contour.points[entry.anchor].map(|v| v.round() as i64);
    while idx > 0 {
        idx -= 1;
        let p = contour.points[idx].map(|v| v.round() as i64);
        if p == last_pixel {
            lo_idx = idx;
            continue;
        }
        if !accept(idx, false, &mut claims) {
            break;
        }
        last_pixel = p;
        lo_idx = idx;
    }
    // Surviving contour too short: propagate nothing.
    let survived_px = (hi_idx - lo_idx) as f64 * 0.1;
    if survived_px < config.min_contour_px {
        return Vec::new();
    }
    claims
}

/// Run the full propagation loop.
pub fn run_propagation(
    seeds: &[Point3<f64>],
    views: &[PropView],
    config: &PropagationConfig,
) -> Result<PropagationOutput, PropagateError> {
    if seeds.is_empty() {
        return Err(PropagateError::NoSeeds);
    }
    let indexes: Vec<ContourIndex> = views.iter().map(ContourIndex::build).collect();
    let mut ledgers: Vec<Grid<f64>> = views
        .iter()
        .map(|v| Grid::from_fill(v.camera.width, v.camera.height, f64::NAN))
        .collect();

    let mut masters: Vec<MasterPoint> = Vec::new();
    let mut queue: Vec<Entry> = Vec::new();
    let mut creation: u64 = 0;
    let mut seeds_with_contours = 0usize;

    // Seed entries: one per view where the seed is visible and a contour
    // passes close to its projection.
    for seed in seeds {
        let mut visible = Vec::new();
        for (vi, view) in views.iter().enumerate() {
            if let Ok(px) = view.camera.project(seed) {
                if view.mask.at(px.x.round() as i64, px.y.round() as i64) {
                    visible.push(vi);
                }
            }
        }
        if visible.is_empty() {
            continue;
        }
        let point_idx = masters.len();
        masters.push(MasterPoint {
            position: *seed,
            normal: None,
            visible_views: visible.clone(),
            count: 0,
            provenance: Provenance::Seed,
        });
        let mut found_any = false;
        for &vi in &visible {
            let view = &views[vi];
            let Ok(parent) = view.camera.project(seed) else {
                continue;
            };
            let frame = view.frame_of(&parent);
            let fpx = apply_homography(&view.frames[frame].homography, &parent);
            if let Some((ci, pi)) = indexes[vi].nearest(view, frame, &fpx, config.snap_radius_px) {
                queue.push(Entry {
                    point: point_idx,
                    view: vi,
                    contour: ci,
                    anchor: pi,
                    confidence: view.contours[ci].confidence,
                    count: 0,
                    creation,
                });
                creation += 1;
                found_any = true;
            }
        }
        if found_any {
            seeds_with_contours += 1;
        }
    }
    if queue.is_empty() {
        return Err(PropagateError::NoSeedContours {
            radius: config.snap_radius_px,
        });
    }

    let mut output = OrientedPointSet::default();
    let mut t = config.t0_deg;
    let mut t_trace = vec![t];
    let mut iterations = Vec::new();
    let mut iter_guard = 0usize;

    while !queue.is_empty() && iter_guard < config.max_iterations {
        iter_guard += 1;
        // Sort: consistent-view count desc, contour confidence desc,
        // creation asc.
        queue.sort_by(|a, b| {
            b.count
                .cmp(&a.count)
                .then(b.confidence.partial_cmp(&a.confidence).unwrap())
                .then(a.creation.cmp(&b.creation))
        });
        let take = ((queue.len() as f64 * config.selection_fraction).ceil() as usize)
            .clamp(1, queue.len());
        let selected: Vec<Entry> = queue.drain(0..take).collect();

        // Parallel walks against the frozen ledgers.
        let walk_results: Vec<Vec<Claim>> = selected
            .par_iter()
            .map(|e| walk_entry(e, &masters[e.point], views, &ledgers, config, t))
            .collect();

        // Merge in creation-index order: first claim of a pixel wins.
        let mut order: Vec<usize> = (0..selected.len()).collect();
        order.sort_by_key(|&i| selected[i].creation);
        let mut produced = 0usize;
        for i in order {
            for claim in &walk_results[i] {
                let (lx, ly) = claim.pixel;
                if ledgers[claim.view].get(lx, ly).is_finite() {
                    continue;
                }
                let depth = views[claim.view].camera.depth_of(&claim.position);
                ledgers[claim.view].set(lx, ly, depth);
                let provenance = if claim.is_anchor
                    && masters[selected[i].point].provenance == Provenance::Seed
                    && masters[selected[i].point].count == 0
                {
                    Provenance::Seed
                } else {
                    Provenance::Propagated
                };
                let master_idx = masters.len();
                masters.push(MasterPoint {
                    position: claim.position,
                    normal: Some(claim.normal),
                    visible_views: claim.views.clone(),
                    count: claim.count,
                    provenance,
                });
                output.points.push(OrientedPoint {
                    position: claim.position,
                    normal: claim.normal,
                    views: claim.count as u32,
                    confidence: claim.confidence,
                    spread_deg: claim.spread_deg,
                    provenance,
                });
                produced += 1;
                // New entries for the other consistent views.
                for &vi in &claim.views {
                    if vi == claim.view {
                        continue;
                    }
                    let view = &views[vi];
                    let Ok(parent) = view.camera.project(&claim.position) else {
                        continue;
                    };
                    if !view.mask.at(parent.x.round() as i64, parent.y.round() as i64) {
                        continue;
                    }
                    let frame = view.frame_of(&parent);
                    let fpx = apply_homography(&view.frames[frame].homography, &parent);
                    if let Some((ci, pi)) =
                        indexes[vi].nearest(view, frame, &fpx, config.snap_radius_px)
                    {
                        queue.push(Entry {
                            point: master_idx,
                            view: vi,
                            contour: ci,
                            anchor: pi,
                            confidence: view.contours[ci].confidence,
                            count: claim.count,
                            creation,
                        });
                        creation += 1;
                    }
                }
            }
        }
        iterations.push(IterationStats {
            t_deg: t,
            selected: take,
            produced,
            total_points: output.points.len(),
        });
        if produced == 0 {
            t *= config.relax_factor;
            if t > config.t_max_deg {
                break;
            }
            t_trace.push(t);
        }
    }

    Ok(PropagationOutput {
        points: output,
        report: PropagationReport {
            t_trace,
            iterations,
            seeds_with_contours,
        },
        ledgers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn ring_frames(n: usize) -> Vec<Frame3> {
        // Cameras on a horizontal ring looking at the origin.
        (0..n)
            .map(|i| {
                let a = 2.0 * PI * i as f64 / (n as f64 * 2.0) - PI / 4.0;
                let eye = Point3::new(10.0 * a.sin(), 0.0, -10.0 * a.cos());
                let z = (Point3::origin() - eye).normalize();
                let up = Vector3::y();
                let x = up.cross(&z).normalize();
                let y = z.cross(&x);
                Frame3 { x, y, z }
            })
            .collect()
    }

    fn azimuth_of(n: &Vector3<f64>, f: &Frame3) -> f64 {
        fold_mod_pi(n.dot(&f.y).atan2(n.dot(&f.x)))
    }

    #[test]
    fn pair_normal_matches_spec_example() {
        // View i world-aligned, θ_i = 0; view j rotated 90° about y with
        // x_j = (0,0,-1), θ_j = 90°.
        let fi = Frame3 {
            x: Vector3::x(),
            y: Vector3::y(),
            z: Vector3::z(),
        };
        let fj = Frame3 {
            x: Vector3::new(0.0, 0.0, -1.0),
            y: Vector3::y(),
            z: Vector3::x(),
        };
        let n = normal_from_azimuth_pair(&fi, 0.0, &fj, FRAC_PI_2).unwrap();
        assert!((n - Vector3::new(-1.0, 0.0, 0.0)).norm() < 1e-12, "{n:?}");
    }

    #[test]
    fn parallel_planes_are_degenerate()
    {
        let f = Frame3 {
            x: Vector3::x(),
            y: Vector3::y(),
            z: Vector3::z(),
        };
        assert!(normal_from_azimuth_pair(&f, 0.3, &f, 0.3).is_none());
    }

    #[test]
    fn pair_normal_round_trips_random_normals() {
        let frames = ring_frames(7);
        let mut seed = 1234u64;
        let mut rand01 = move || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
            (seed >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..100 {
            // A normal facing the cameras (negative z dominant).
            let n = Vector3::new(rand01() - 0.5, rand01() - 0.5, -0.5 - rand01()).normalize();
            let ti = azimuth_of(&n, &frames[1]);
            let tj = azimuth_of(&n, &frames[5]);
            if let Some(rec) = normal_from_azimuth_pair(&frames[1], ti, &frames[5], tj) {
                let aligned = if rec.dot(&n) < 0.0 { -rec } else { rec };
                assert!(
                    (aligned - n).norm() < 1e-9,
                    "recovered {aligned:?} vs true {n:?}"
                );
            }
        }
    }

    #[test]
    fn azimuth_in_frame_inverts_plane_normal() {
        let f = Frame3 {
            x: Vector3::x(),
            y: Vector3::y(),
            z: Vector3::z(),
        };
        for theta in [0.0, 0.4, 1.2, 2.9] {
            let m = azimuth_plane_normal(&f, theta);
            let back = azimuth_in_frame(&m, &f);
            assert!(crate::math::mod_pi_distance(back, theta) < 1e-12);
        }
    }

    #[test]
    fn seven_agreeing_views_pass() {
        let frames = ring_frames(7);
        let n_true = Vector3::new(0.2, -0.1, -1.0).normalize();
        let probe = |v: usize, _p: &Point3<f64>| Some((azimuth_of(&n_true, &frames[v]), frames[v]));
        let out = consistency_check(&Point3::origin(), &[0, 1, 2, 3, 4, 5, 6], &probe, 3.0, 3);
        assert!(out.consistent);
        assert_eq!(out.count, 7);
        let n = out.normal.unwrap();
        assert!((n - n_true).norm() < 1e-9, "normal {n:?}");
        assert!(out.spread_deg < 1e-6);
    }

    #[test]
    fn corrupted_view_is_discarded() {
        let frames = ring_frames(7);
        let n_true = Vector3::new(0.1, 0.25, -1.0).normalize();
        let probe = |v: usize, _p: &Point3<f64>| {
            let mut theta = azimuth_of(&n_true, &frames[v]);
            if v == 3 {
                theta = fold_mod_pi(theta + 30.0f64.to_radians());
            }
            Some((theta, frames[v]))
        };
        let out = consistency_check(&Point3::origin(), &[0, 1, 2, 3, 4, 5, 6], &probe, 3.0, 3);
        assert!(out.consistent);
        assert_eq!(out.count, 6);
        assert!(!out.views.contains(&3), "corrupted view kept: {:?}", out.views);
    }

    #[test]
    fn two_views_are_never_consistent() {
        let frames = ring_frames(7);
        let n_true = Vector3::new(0.0, 0.3, -1.0).normalize();
        let probe = |v: usize, _p: &Point3<f64>| Some((azimuth_of(&n_true, &frames[v]), frames[v]));
        let out = consistency_check(&Point3::origin(), &[0, 4], &probe, 3.0, 3);
        assert!(!out.consistent);
    }

    #[test]
    fn schedule_is_geometric_and_capped() {
        let cfg = PropagationConfig::default();
        let sched = t_schedule(&cfg);
        let expect = [3.0, 3.9, 5.07, 6.591, 8.5683, 11.13879, 14.480427];
        assert_eq!(sched.len(), expect.len());
        for (a, b) in sched.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!(*sched.last().unwrap() <= 15.0);
        assert!(sched.last().unwrap() * 1.3 > 15.0);
    }

    #[test]
    fn empty_seed_list_errors() {
        let r = run_propagation(&[], &[], &PropagationConfig::default());
        assert!(matches!(r, Err(PropagateError::NoSeeds)));
    }
}

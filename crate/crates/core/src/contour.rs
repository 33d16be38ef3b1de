//! Sub-pixel iso-depth contour tracing.
//!
//! From a seed pixel, the tracer steps 0.1 px at a time along the two
//! directions perpendicular to the local azimuth, re-reading the azimuth by
//! mod-π bilinear interpolation at every step. Tracing stops at 500 steps
//! per direction, at invalid azimuths, at the image border and at depth
//! discontinuities. Contour confidence is the inverse of the maximum
//! discrete curvature along the (smoothed) polyline.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::img::{bilinear_mod_pi, Grid};

/// Sub-pixel polyline in one view (and cell, when subdivided).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IsoDepthContour {
    pub view: u32,
    /// Cell index, -1 when the view is not subdivided.
    pub cell: i32,
    pub confidence: f64,
    /// Ordered points, consecutive ones 0.1 px apart.
    pub points: Vec<[f64; 2]>,
    pub seed_index: u64,
}

/// Per-pixel depth-discontinuity flags (true = depth edge).
pub type DiscontinuityMask = Grid<bool>;

#[derive(Debug, Clone, Copy)]
pub struct TraceOptions {
    pub step: f64,
    pub max_steps: usize,
    /// |∇ log(I+ε)| threshold for the discontinuity detector.
    pub grad_threshold: f64,
    /// Intensities below this fraction of the dynamic range do not vote.
    pub intensity_floor: f64,
    /// Seed grid stride in pixels.
    pub seed_stride: usize,
    /// A new contour covered this much by existing ones is dropped.
    pub coverage_drop: f64,
    /// Coverage radius in pixels.
    pub coverage_radius: f64,
}

impl Default for TraceOptions {
    fn default() -> Self {
        Self {
            step: 0.1,
            max_steps: 500,
            grad_threshold: 0.35,
            intensity_floor: 0.02,
            seed_stride: 2,
            coverage_drop: 0.9,
            coverage_radius: 0.3,
        }
    }
}

/// Flag depth discontinuities from a (normalized) image stack: a pixel is
/// flagged when, for any light whose local intensities are all above the
/// floor, the central-difference gradient of `log(I + ε)` exceeds the
/// threshold — or when the pixel touches the mask boundary.
pub fn detect_discontinuities(
    stack: &[Grid<f32>],
    mask: &Grid<bool>,
    options: &TraceOptions,
) -> DiscontinuityMask {
    let w = mask.width();
    let h = mask.height();
    let mut dynamic_range = 0.0f64;
    for img in stack {
        for &v in img.data() {
            if v.is_finite() {
                dynamic_range = dynamic_range.max(v as f64);
            }
        }
    }
    let eps = 1e-4 * dynamic_range.max(1e-12);
    let floor = options.intensity_floor * dynamic_range;
    Grid::from_fn(w, h, |x, y| {
        if !mask.get(x, y) {
            return false;
        }
        // Mask boundary pixels are always flagged.
        let xi = x as i64;
        let yi = y as i64;
        for (dx, dy) in [(-1, 0), (1, 0), (0, -1), (0, 1)] {
            if !mask.at(xi + dx, yi + dy) {
                return true;
            }
        }
        let mut max_grad = 0.0f64;
        for img in stack {
            let c = img.get(x, y) as f64;
            for (a, b) in [
                (img.get(x - 1, y) as f64, img.get(x + 1, y) as f64),
                (img.get(x, y - 1) as f64, img.get(x, y + 1) as f64),
            ] {
                if !a.is_finite() || !b.is_finite() || !c.is_finite() {
                    continue;
                }
                // Terminator pixels (n·l → 0 for this light) blow up the log
                // gradient without marking geometry; skip dim stencils.
                if a < floor || b < floor || c < floor {
                    continue;
                }
                let g = 0.5 * ((b + eps).ln() - (a + eps).ln()).abs();
                max_grad = max_grad.max(g);
            }
        }
        max_grad > options.grad_threshold
    })
}

fn is_discontinuous(disc: &DiscontinuityMask, x: f64, y: f64) -> bool {
    let xi = x.round() as i64;
    let yi = y.round() as i64;
    !disc.in_bounds(xi, yi) || disc.get(xi as usize, yi as usize)
}

/// Trace one iso-depth contour from a seed pixel. Returns an empty polyline
/// when the seed is invalid (NaN azimuth or on a discontinuity).
pub fn trace(
    azimuth: &Grid<f64>,
    disc: &DiscontinuityMask,
    seed: [f64; 2],
    options: &TraceOptions,
) -> Vec<[f64; 2]> {
    let theta0 = bilinear_mod_pi(azimuth, seed[0], seed[1]);
    if theta0.is_nan() || is_discontinuous(disc, seed[0], seed[1]) {
        return Vec::new();
    }
    let dir_of = |theta: f64| {
        let a = theta + std::f64::consts::FRAC_PI_2;
        [a.cos(), a.sin()]
    };
    let mut halves: [Vec<[f64; 2]>; 2] = [Vec::new(), Vec::new()];
    for (side, sign) in [(0usize, 1.0f64), (1, -1.0)] {
        let mut pos = seed;
        let d0 = dir_of(theta0);
        let mut prev = [sign * d0[0], sign * d0[1]];
        for _ in 0..options.max_steps {
            let theta = bilinear_mod_pi(azimuth, pos[0], pos[1]);
            if theta.is_nan() {
                break;
            }
            let mut d = dir_of(theta);
            // Resolve the ±π/2 ambiguity by forward continuity.
            if d[0] * prev[0] + d[1] * prev[1] < 0.0 {
                d = [-d[0], -d[1]];
            }
            let next = [pos[0] + options.step * d[0], pos[1] + options.step * d[1]];
            if next[0] < 0.0
                || next[1] < 0.0
                || next[0] > (azimuth.width() - 1) as f64
                || next[1] > (azimuth.height() - 1) as f64
            {
                break;
            }
            if is_discontinuous(disc, next[0], next[1]) {
                break;
            }
            if bilinear_mod_pi(azimuth, next[0], next[1]).is_nan() {
                break;
            }
            halves[side].push(next);
            prev = d;
            pos = next;
        }
    }
    let mut points = Vec::with_capacity(halves[0].len() + halves[1].len() + 1);
    points.extend(halves[1].iter().rev().copied());
    points.push(seed);
    points.extend(halves[0].iter().copied());
    points
}

/// Inverse of the maximum discrete curvature along the contour, capped at
/// 1e6. Curvature uses circumscribed circles of point triples spaced 5 steps
/// apart on a 5-point moving-average smoothing of the polyline.
pub fn contour_confidence(points: &[[f64; 2]], options: &TraceOptions) -> f64 {
    if points.len() < 3 {
        return 0.0;
    }
    let smoothed = moving_average(points, 5);
    let span = 5.min((smoothed.len() - 1) / 2).max(1);
    let mut kappa_max = 0.0f64;
    let mut i = span;
    while i + span < smoothed.len() {
        let a = smoothed[i - span];
        let b = smoothed[i];
        let c = smoothed[i + span];
        kappa_max = kappa_max.max(circumcircle_curvature(a, b, c));
        i += span;
    }
    let _ = options;
    1.0 / kappa_max.max(1e-6)
}

fn moving_average(points: &[[f64; 2]], window: usize) -> Vec<[f64; 2]> {
    let half = window / 2;
    (0..points.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half).min(points.len() - 1);
            let n = (hi - lo + 1) as f64;
            let mut sx = 0.0;
            let mut sy = 0.0;
            for p in &points[lo..=hi] {
                sx += p[0];
                sy += p[1];
            }
            [sx / n, sy / n]
        })
        .collect()
}

fn circumcircle_curvature(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    let ab = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
    let bc = ((c[0] - b[0]).powi(2) + (c[1] - b[1]).powi(2)).sqrt();
    let ca = ((a[0] - c[0]).powi(2) + (a[1] - c[1]).powi(2)).sqrt();
    let area2 = ((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])).abs();
    if ab * bc * ca < 1e-300 {
        return 0.0;
    }
    // κ = 1/R = 4·Area / (|ab||bc||ca|), with Area = area2/2.
    2.0 * area2 / (ab * bc * ca)
}

/// Spatial hash used by the coverage filter.
struct CoverageIndex {
    cell: f64,
    map: std::collections::HashMap<(i64, i64), Vec<[f64; 2]>>,
}

impl CoverageIndex {
    fn new(radius: f64) -> Self {
        Self {
            cell: radius.max(1e-3),
            map: std::collections::HashMap::new(),
        }
    }

    fn key(&self, p: [f64; 2]) -> (i64, i64) {
        ((p[0] / self.cell).floor() as i64, (p[1] / self.cell).floor() as i64)
    }

    fn insert(&mut self, p: [f64; 2]) {
        self.map.entry(self.key(p)).or_default().push(p);
    }

    fn covered(&self, p: [f64; 2], radius: f64) -> bool {
        let (kx, ky) = self.key(p);
        let r2 = radius * radius;
        for dx in -1..=1 {
            for dy in -1..=1 {
                if let Some(points) = self.map.get(&(kx + dx, ky + dy)) {
                    for q in points {
                        let d2 = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2);
                        if d2 <= r2 {
                            return true;
                        }
                    }
                }
            }
        }
        false
    }
}

/// Trace contours from a regular seed grid over the valid pixels, dropping
/// contours already covered by previously kept ones. Tracing runs in
/// parallel; the dedup filter is a sequential pass in seed order, so the
/// result is deterministic.
pub fn trace_all(
    azimuth: &Grid<f64>,
    disc: &DiscontinuityMask,
    view: u32,
    cell: i32,
    options: &TraceOptions,
) -> Vec<IsoDepthContour> {
    let stride = options.seed_stride.max(1);
    let mut seeds = Vec::new();
    let mut y = 0;
    while y < azimuth.height() {
        let mut x = 0;
        while x < azimuth.width() {
            if azimuth.get(x, y).is_finite() && !disc.get(x, y) {
                seeds.push([x as f64, y as f64]);
            }
            x += stride;
        }
        y += stride;
    }
    let traced: Vec<Vec<[f64; 2]>> = seeds
        .par_iter()
        .map(|&s| trace(azimuth, disc, s, options))
        .collect();

    let mut index = CoverageIndex::new(options.coverage_radius);
    let mut contours = Vec::new();
    for (si, points) in traced.into_iter().enumerate() {
        if points.len() < 3 {
            continue;
        }
        let covered = points
            .iter()
            .filter(|&&p| index.covered(p, options.coverage_radius))
            .count();
        if (covered as f64) >= options.coverage_drop * points.len() as f64 {
            continue;
        }
        for &p in &points {
            index.insert(p);
        }
        let confidence = contour_confidence(&points, options);
        contours.push(IsoDepthContour {
            view,
            cell,
            confidence,
            points,
            seed_index: si as u64,
        });
    }
    contours
}

/// Binary contour container: u64 count, then per contour
/// `{u32 view, i32 cell, f32 confidence, u32 n, n × (f32 x, f32 y)}`.
pub fn write_contours(path: &std::path::Path, contours: &[IsoDepthContour]) -> std::io::Result<()> {
    use crate::io::{write_f32, write_u32, write_u64};
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_u64(&mut w, contours.len() as u64)?;
    for c in contours {
        write_u32(&mut w, c.view)?;
        w_i32(&mut w, c.cell)?;
        write_f32(&mut w, c.confidence as f32)?;
        write_u32(&mut w, c.points.len() as u32)?;
        for p in &c.points {
            write_f32(&mut w, p[0] as f32)?;
            write_f32(&mut w, p[1] as f32)?;
        }
    }
    Ok(())
}

fn w_i32(w: &mut impl std::io::Write, v: i32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn r_i32(r: &mut impl std::io::Read) -> std::io::Result<i32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(i32::from_le_bytes(b))
}

pub fn read_contours(path: &std::path::Path) -> std::io::Result<Vec<IsoDepthContour>> {
    use crate::io::{read_f32, read_u32, read_u64};
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let n = read_u64(&mut r)? as usize;
    let mut contours = Vec::with_capacity(n);
    for i in 0..n {
        let view = read_u32(&mut r)?;
        let cell = r_i32(&mut r)?;
        let confidence = read_f32(&mut r)? as f64;
        let count = read_u32(&mut r)? as usize;
        let mut points = Vec::with_capacity(count);
        for _ in 0..count {
            let x = read_f32(&mut r)? as f64;
            let y = read_f32(&mut r)? as f64;
            points.push([x, y]);
        }
        contours.push(IsoDepthContour {
            view,
            cell,
            confidence,
            points,
            seed_index: i as u64,
        });
    }
    Ok(contours)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_disc(w: usize, h: usize) -> DiscontinuityMask {
        Grid::from_fill(w, h, false)
    }

    #[test]
    fn constant_field_gives_straight_vertical_contour() {
        // θ = 0 everywhere: trace directions are (cos ±90°, sin ±90°) = ±y.
        let az = Grid::from_fill(201, 201, 0.0f64);
        let points = trace(&az, &no_disc(201, 201), [100.0, 100.0], &TraceOptions::default());
        assert_eq!(points.len(), 1001);
        let xs: Vec<f64> = points.iter().map(|p| p[0]).collect();
        for x in xs {
            assert!((x - 100.0).abs() < 1e-9);
        }
        let y_min = points.iter().map(|p| p[1]).fold(f64::MAX, f64::min);
        let y_max = points.iter().map(|p| p[1]).fold(f64::MIN, f64::max);
        assert!((y_max - y_min - 100.0).abs() < 1e-9);
    }

    #[test]
    fn invalid_seed_returns_empty() {
        let mut az = Grid::from_fill(32, 32, 0.5f64);
        az.set(10, 10, f64::NAN);
        az.set(11, 10, f64::NAN);
        az.set(10, 11, f64::NAN);
        az.set(11, 11, f64::NAN);
        let points = trace(&az, &no_disc(32, 32), [10.2, 10.4], &TraceOptions::default());
        assert!(points.is_empty());
    }

    #[test]
    fn contour_stops_at_discontinuity_line() {
        let az = Grid::from_fill(101, 101, 0.0f64);
        let mut disc = no_disc(101, 101);
        for x in 0..101 {
            disc.set(x, 30, true);
        }
        let points = trace(&az, &disc, [50.0, 50.0], &TraceOptions::default());
        assert!(!points.is_empty());
        for p in &points {
            assert!(p[1] > 30.4, "crossed the discontinuity: {p:?}");
            assert!(
                !disc.get(p[0].round() as usize, p[1].round() as usize),
                "point on flagged pixel"
            );
        }
    }

    #[test]
    fn straight_contour_confidence_hits_cap() {
        let points: Vec<[f64; 2]> = (0..200).map(|i| [i as f64 * 0.1, 5.0]).collect();
        let c = contour_confidence(&points, &TraceOptions::default());
        assert_eq!(c, 1e6);
    }

    #[test]
    fn circular_arc_confidence_matches_radius() {
        let r = 10.0;
        let points: Vec<[f64; 2]> = (0..400)
            .map(|i| {
                let a = i as f64 * 0.1 / r; // arclength 0.1 px steps
                [50.0 + r * a.cos(), 50.0 + r * a.sin()]
            })
            .collect();
        let c = contour_confidence(&points, &TraceOptions::default());
        assert!(
            (c - r).abs() < 0.1 * r,
            "confidence {c} should be ≈ radius {r}"
        );
    }

    #[test]
    fn nested_circles_rank_by_radius() {
        let mk = |r: f64| -> Vec<[f64; 2]> {
            (0..300)
                .map(|i| {
                    let a = i as f64 * 0.1 / r;
                    [r * a.cos(), r * a.sin()]
                })
                .collect()
        };
        let opts = TraceOptions::default();
        let smooth = contour_confidence(&mk(40.0), &opts);
        let tight = contour_confidence(&mk(8.0), &opts);
        assert!(smooth > tight);
    }

    #[test]
    fn retrace_reproduces_contour() {
        // A smoothly varying azimuth field: retracing from a mid-contour
        // point must reproduce the same point set (0.05 px Hausdorff).
        let az = Grid::from_fn(121, 121, |x, y| {
            0.3 + 0.002 * (x as f64) + 0.001 * (y as f64)
        });
        let opts = TraceOptions::default();
        let disc = no_disc(121, 121);
        let first = trace(&az, &disc, [60.0, 60.0], &opts);
        assert!(first.len() > 500);
        let mid = first[first.len() / 3];
        let second = trace(&az, &disc, mid, &opts);
        // One-sided Hausdorff: every point of the shorter retrace must be
        // near the first polyline.
        let mut worst = 0.0f64;
        for p in second.iter().step_by(17) {
            let mut best = f64::MAX;
            for q in &first {
                let d = ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
                best = best.min(d);
            }
            worst = worst.max(best);
        }
        assert!(worst < 0.05, "Hausdorff {worst}");
    }

    #[test]
    fn mask_boundary_is_always_flagged() {
        let stack = vec![Grid::from_fill(16, 16, 0.5f32)];
        let mask = Grid::from_fn(16, 16, |x, y| (2..14).contains(&x) && (2..14).contains(&y));
        let disc = detect_discontinuities(&stack, &mask, &TraceOptions::default());
        assert!(disc.get(2, 8));
        assert!(disc.get(13, 8));
        assert!(disc.get(8, 2));
        assert!(!disc.get(8, 8));
    }

    #[test]
    fn contours_file_round_trip() {
        let dir = std::env::temp_dir().join("mvps_contour_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("contours.bin");
        let contours = vec![IsoDepthContour {
            view: 3,
            cell: -1,
            confidence: 12.5,
            points: vec![[1.0, 2.0], [1.1, 2.0], [1.2, 2.1]],
            seed_index: 0,
        }];
        write_contours(&path, &contours).unwrap();
        let back = read_contours(&path).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].view, 3);
        assert_eq!(back[0].cell, -1);
        assert_eq!(back[0].points.len(), 3);
        assert!((back[0].points[2][1] - 2.1).abs() < 1e-6);
    }
}

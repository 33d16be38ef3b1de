//! Planar Delaunay triangulation (Bowyer–Watson) and barycentric linear
//! interpolation, used to resample light-direction observations projected to
//! the unit disk.
//!
//! Ring constellations are exactly cocircular, which is degenerate input for
//! incircle tests; point coordinates are therefore perturbed by a
//! deterministic sub-nanometer jitter to fix the topology, while barycentric
//! weights are computed from the original coordinates so linear functions
//! are reproduced exactly.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DelaunayError {
    #[error("need at least 3 samples, got {0}")]
    TooFewSamples(usize),
    #[error("samples are (near-)collinear; no triangulation exists")]
    Degenerate,
}

fn jitter(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut scale = 0.0f64;
    for p in points {
        scale = scale.max(p[0].abs()).max(p[1].abs());
    }
    let eps = 1e-9 * scale.max(1e-12);
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let h1 = crate::math::fnv1a64(&(i as u64).to_le_bytes());
            let h2 = crate::math::fnv1a64(&(h1 ^ 0x9e3779b97f4a7c15).to_le_bytes());
            let j1 = (h1 % 2_000_003) as f64 / 1_000_001.5 - 1.0;
            let j2 = (h2 % 2_000_003) as f64 / 1_000_001.5 - 1.0;
            [p[0] + eps * j1, p[1] + eps * j2]
        })
        .collect()
}

#[inline]
fn orient(a: &[f64; 2], b: &[f64; 2], c: &[f64; 2]) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

/// Positive when `p` is inside the circumcircle of CCW triangle `(a, b, c)`.
fn in_circumcircle(a: &[f64; 2], b: &[f64; 2], c: &[f64; 2], p: &[f64; 2]) -> bool {
    let ax = a[0] - p[0];
    let ay = a[1] - p[1];
    let bx = b[0] - p[0];
    let by = b[1] - p[1];
    let cx = c[0] - p[0];
    let cy = c[1] - p[1];
    let det = (ax * ax + ay * ay) * (bx * cy - cx * by)
        - (bx * bx + by * by) * (ax * cy - cx * ay)
        + (cx * cx + cy * cy) * (ax * by - bx * ay);
    det > 0.0
}

/// Delaunay triangulation of a planar point set. Returns CCW triangles as
/// index triples into `points`.
pub fn triangulate(points: &[[f64; 2]]) -> Result<Vec<[usize; 3]>, DelaunayError> {
    if points.len() < 3 {
        return Err(DelaunayError::TooFewSamples(points.len()));
    }
    let pts = jitter(points);
    // Collinearity check on the jittered set: the jitter is small enough to
    // keep truly collinear inputs degenerate for interpolation purposes.
    let mut span = 0.0f64;
    let mut scale = 0.0f64;
    for i in 1..pts.len() {
        for j in (i + 1)..pts.len() {
            span = span.max(orient(&pts[0], &pts[i], &pts[j]).abs());
            scale = scale
                .max((pts[i][0] - pts[0][0]).abs())
                .max((pts[i][1] - pts[0][1]).abs());
        }
    }
    if span < 1e-12 * scale.max(1e-12) {
        return Err(DelaunayError::Degenerate);
    }

    // Super-triangle comfortably containing everything.
    let (mut min_x, mut min_y, mut max_x, mut max_y) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for p in &pts {
        min_x = min_x.min(p[0]);
        min_y = min_y.min(p[1]);
        max_x = max_x.max(p[0]);
        max_y = max_y.max(p[1]);
    }
    let d = (max_x - min_x).max(max_y - min_y).max(1e-9);
    let cx = 0.5 * (min_x + max_x);
    let cy = 0.5 * (min_y + max_y);
    let mut all = pts.clone();
    all.push([cx - 20.0 * d, cy - 10.0 * d]);
    all.push([cx + 20.0 * d, cy - 10.0 * d]);
    all.push([cx, cy + 20.0 * d]);
    let s0 = pts.len();

    let mut tris: Vec<[usize; 3]> = vec![[s0, s0 + 1, s0 + 2]];
    for (pi, p) in pts.iter().enumerate() {
        let mut bad: Vec<usize> = Vec::new();
        for (ti, t) in tris.iter().enumerate() {
            if in_circumcircle(&all[t[0]], &all[t[1]], &all[t[2]], p) {
                bad.push(ti);
            }
        }
        // Boundary of the cavity: edges used by exactly one bad triangle.
        let mut edges: Vec<(usize, usize)> = Vec::new();
        for &ti in &bad {
            let t = tris[ti];
            for e in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
                let rev = (e.1, e.0);
                if let Some(pos) = edges.iter().position(|&x| x == rev) {
                    edges.remove(pos);
                } else {
                    edges.push(e);
                }
            }
        }
        for &ti in bad.iter().rev() {
            tris.swap_remove(ti);
        }
        for (a, b) in edges {
            // Keep CCW orientation.
            if orient(&all[a], &all[b], p) > 0.0 {
                tris.push([a, b, pi]);
            } else {
                tris.push([b, a, pi]);
            }
        }
    }
    tris.retain(|t| t.iter().all(|&v| v < s0));
    tris.sort();
    Ok(tris)
}

/// Triangulated scattered-data interpolator over the unit disk.
#[derive(Debug, Clone)]
pub struct DiskInterpolator {
    original: Vec<[f64; 2]>,
    jittered: Vec<[f64; 2]>,
    triangles: Vec<[usize; 3]>,
}

impl DiskInterpolator {
    pub fn new(points: &[[f64; 2]]) -> Result<Self, DelaunayError> {
        let triangles = triangulate(points)?;
        Ok(Self {
            original: points.to_vec(),
            jittered: jitter(points),
            triangles,
        })
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    /// Linearly interpolate `values` at `q`. None outside the convex hull.
    /// The containing triangle is located with the jittered geometry (which
    /// defined the topology); barycentric weights use the original points,
    /// so linear functions are reproduced exactly.
    pub fn interpolate(&self, values: &[f64], q: [f64; 2]) -> Option<f64> {
        assert_eq!(values.len(), self.original.len());
        let (idx, w) = self.plan_one(q)?;
        Some(w[0] * values[idx[0]] + w[1] * values[idx[1]] + w[2] * values[idx[2]])
    }

    /// Precompute the sample indices and barycentric weights of one query.
    pub fn plan_one(&self, q: [f64; 2]) -> Option<([usize; 3], [f64; 3])> {
        const TOL: f64 = -1e-7;
        for t in &self.triangles {
            let a = &self.jittered[t[0]];
            let b = &self.jittered[t[1]];
            let c = &self.jittered[t[2]];
            let area = orient(a, b, c);
            if area.abs() < 1e-300 {
                continue;
            }
            let w0 = orient(b, c, &q) / area;
            let w1 = orient(c, a, &q) / area;
            let w2 = orient(a, b, &q) / area;
            if w0 >= TOL && w1 >= TOL && w2 >= TOL {
                // Recompute the weights from the unjittered coordinates.
                let a = &self.original[t[0]];
                let b = &self.original[t[1]];
                let c = &self.original[t[2]];
                let area = orient(a, b, c);
                if area.abs() < 1e-300 {
                    return None;
                }
                let w0 = orient(b, c, &q) / area;
                let w1 = orient(c, a, &q) / area;
                let w2 = orient(a, b, &q) / area;
                return Some((*t, [w0, w1, w2]));
            }
        }
        None
    }

    /// Plans for a batch of queries (shared-geometry fast path).
    pub fn plan(&self, queries: &[[f64; 2]]) -> Vec<Option<([usize; 3], [f64; 3])>> {
        queries.iter().map(|&q| self.plan_one(q)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_has_two_triangles() {
        let pts = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
        let tris = triangulate(&pts).unwrap();
        assert_eq!(tris.len(), 2);
    }

    #[test]
    fn collinear_is_degenerate() {
        let pts = [[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [3.0, 0.0]];
        assert!(matches!(triangulate(&pts), Err(DelaunayError::Degenerate)));
    }

    #[test]
    fn linear_functions_reproduce_exactly() {
        // Two concentric rings (exactly cocircular points).
        let mut pts = Vec::new();
        for k in 0..16 {
            let a = std::f64::consts::TAU * k as f64 / 16.0;
            pts.push([0.4 * a.cos(), 0.4 * a.sin()]);
        }
        for k in 0..16 {
            let a = std::f64::consts::TAU * (k as f64 + 0.31) / 16.0;
            pts.push([0.8 * a.cos(), 0.8 * a.sin()]);
        }
        let f = |p: &[f64; 2]| 0.7 + 1.3 * p[0] - 2.1 * p[1];
        let values: Vec<f64> = pts.iter().map(f).collect();
        let interp = DiskInterpolator::new(&pts).unwrap();
        for q in [[0.0, 0.5], [0.3, -0.3], [-0.55, 0.1], [0.6, 0.2]] {
            let got = interp.interpolate(&values, q).expect("inside hull");
            assert!((got - f(&q)).abs() < 1e-12, "{got} vs {}", f(&q));
        }
    }

    #[test]
    fn outside_hull_is_missing() {
        let pts = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
        let interp = DiskInterpolator::new(&pts).unwrap();
        let values = [1.0, 2.0, 3.0];
        assert!(interp.interpolate(&values, [2.0, 2.0]).is_none());
        assert!(interp.interpolate(&values, [0.2, 0.2]).is_some());
    }

    #[test]
    fn delaunay_empty_circumcircles() {
        // Property: no input point lies strictly inside any triangle's
        // circumcircle (on the jittered geometry).
        let mut pts = Vec::new();
        for i in 0..7 {
            for j in 0..5 {
                pts.push([i as f64 * 0.31 + (j as f64 * 0.17).sin() * 0.05, j as f64 * 0.29]);
            }
        }
        let jit = jitter(&pts);
        let tris = triangulate(&pts).unwrap();
        for t in &tris {
            for (pi, p) in jit.iter().enumerate() {
                if t.contains(&pi) {
                    continue;
                }
                assert!(
                    !in_circumcircle(&jit[t[0]], &jit[t[1]], &jit[t[2]], p),
                    "point {pi} inside circumcircle of {t:?}"
                );
            }
        }
    }
}

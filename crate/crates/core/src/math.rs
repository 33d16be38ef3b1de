//! Small numeric helpers shared across the pipeline.

use nalgebra::{Rotation3, Unit, Vector3};

/// Fold an angle into `[0, π)`. NaN stays NaN.
pub fn fold_mod_pi(theta: f64) -> f64 {
    let mut t = theta % std::f64::consts::PI;
    if t < 0.0 {
        t += std::f64::consts::PI;
    }
    // -1e-18 % π can round to exactly π.
    if t >= std::f64::consts::PI {
        t -= std::f64::consts::PI;
    }
    t
}

/// Circular distance between two angles that are equivalent mod π,
/// in `[0, π/2]`.
pub fn mod_pi_distance(a: f64, b: f64) -> f64 {
    let d = fold_mod_pi(a - b);
    d.min(std::f64::consts::PI - d)
}

/// Minimal rotation taking unit vector `from` onto unit vector `to`
/// (rotation axis ⊥ both, no in-plane twist). Returns identity when the
/// vectors are already aligned; for anti-parallel inputs an arbitrary
/// orthogonal axis is used.
pub fn minimal_rotation(from: &Vector3<f64>, to: &Vector3<f64>) -> Rotation3<f64> {
    let f = from.normalize();
    let t = to.normalize();
    let c = f.dot(&t).clamp(-1.0, 1.0);
    let axis = f.cross(&t);
    let s = axis.norm();
    if s < 1e-15 {
        if c > 0.0 {
            return Rotation3::identity();
        }
        // Anti-parallel: rotate π about any axis orthogonal to `f`.
        let ortho = if f.x.abs() < 0.9 {
            Vector3::x()
        } else {
            Vector3::y()
        };
        let axis = f.cross(&ortho).normalize();
        return Rotation3::from_axis_angle(&Unit::new_unchecked(axis), std::f64::consts::PI);
    }
    let angle = s.atan2(c);
    Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle)
}

/// Mean of a slice; NaN for empty input.
pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Median of a slice (mean of the two middle values for even lengths).
/// NaN for empty input.
pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v: Vec<f64> = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Linear-interpolation quantile of a slice, `q` in `[0, 1]`.
pub fn quantile(xs: &[f64], q: f64) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v: Vec<f64> = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        v[lo]
    } else {
        v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
    }
}

/// Root mean square of a slice; NaN for empty input.
pub fn rms(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    (xs.iter().map(|x| x * x).sum::<f64>() / xs.len() as f64).sqrt()
}

/// Pearson correlation coefficient of two equal-length samples.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len();
    if n < 2 {
        return f64::NAN;
    }
    let ma = mean(a);
    let mb = mean(b);
    let mut num = 0.0;
    let mut da = 0.0;
    let mut db = 0.0;
    for i in 0..n {
        let xa = a[i] - ma;
        let xb = b[i] - mb;
        num += xa * xb;
        da += xa * xa;
        db += xb * xb;
    }
    num / (da.sqrt() * db.sqrt())
}

/// FNV-1a 64-bit hash, used for content-addressed stage caching.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Parabolic refinement of a discrete minimum: given samples
/// `(y_prev, y_min, y_next)` at unit spacing around the grid minimum,
/// returns the sub-grid offset in `(-0.5, 0.5)`.
pub fn parabolic_offset(y_prev: f64, y_min: f64, y_next: f64) -> f64 {
    let denom = y_prev - 2.0 * y_min + y_next;
    if denom.abs() < 1e-300 {
        return 0.0;
    }
    let off = 0.5 * (y_prev - y_next) / denom;
    off.clamp(-0.5, 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn fold_basics() {
        assert!((fold_mod_pi(PI + 0.25) - 0.25).abs() < 1e-12);
        assert!((fold_mod_pi(-0.25) - (PI - 0.25)).abs() < 1e-12);
        assert_eq!(fold_mod_pi(0.0), 0.0);
        assert!(fold_mod_pi(123.456).is_finite());
        assert!(fold_mod_pi(f64::NAN).is_nan());
    }

    #[test]
    fn mod_pi_distance_wraps() {
        assert!((mod_pi_distance(0.01, PI - 0.01) - 0.02).abs() < 1e-12);
        assert!((mod_pi_distance(1.0, 1.0)).abs() < 1e-12);
    }

    #[test]
    fn minimal_rotation_maps_and_has_orthogonal_axis() {
        let z = Vector3::z();
        let t = Vector3::new(1.0, 0.0, 1.0).normalize();
        let r = minimal_rotation(&z, &t);
        assert!((r * z - t).norm() < 1e-12);
        // 45° about (0, 1, 0)
        let (axis, angle) = r.axis_angle().unwrap();
        assert!((angle - PI / 4.0).abs() < 1e-12);
        assert!((axis.into_inner() - Vector3::new(0.0, 1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn median_even_odd() {
        assert_eq!(median(&[1.0, 9.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn parabolic_vertex() {
        // y = (x - 0.3)^2 sampled at -1, 0, 1
        let f = |x: f64| (x - 0.3) * (x - 0.3);
        let off = parabolic_offset(f(-1.0), f(0.0), f(1.0));
        assert!((off - 0.3).abs() < 1e-12);
    }
}

//! Analytic implicit shapes with exact signed distance and gradient,
//! ray-cast by sphere tracing. Exactness is what qualifies them as oracles.

use nalgebra::{Point3, UnitQuaternion, Vector3};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ShapeKind {
    /// Plane through `center`; the local +z axis is the outward normal.
    Plane,
    /// Sphere of radius `r1`.
    Sphere,
    /// Infinite cylinder of radius `r1` around the local z axis.
    Cylinder,
    /// Torus with major radius `r1` and minor radius `r2`, around local z.
    Torus,
}

/// Implicit shape: `F(p) = 0` on the surface, `F` is a true signed distance
/// for every kind here, and the gradient is available everywhere.
#[derive(Debug, Clone)]
pub struct AnalyticShape {
    pub kind: ShapeKind,
    pub center: Point3<f64>,
    pub r1: f64,
    pub r2: f64,
    pub orientation: UnitQuaternion<f64>,
}

impl AnalyticShape {
    pub fn sphere(center: Point3<f64>, radius: f64) -> Self {
        assert!(radius > 0.0);
        Self {
            kind: ShapeKind::Sphere,
            center,
            r1: radius,
            r2: 0.0,
            orientation: UnitQuaternion::identity(),
        }
    }

    pub fn plane(center: Point3<f64>, orientation: UnitQuaternion<f64>) -> Self {
        Self {
            kind: ShapeKind::Plane,
            center,
            r1: 1.0,
            r2: 0.0,
            orientation,
        }
    }

    pub fn cylinder(center: Point3<f64>, radius: f64, orientation: UnitQuaternion<f64>) -> Self {
        assert!(radius > 0.0);
        Self {
            kind: ShapeKind::Cylinder,
            center,
            r1: radius,
            r2: 0.0,
            orientation,
        }
    }

    pub fn torus(
        center: Point3<f64>,
        major: f64,
        minor: f64,
        orientation: UnitQuaternion<f64>,
    ) -> Self {
        assert!(major > 0.0 && minor > 0.0 && minor < major);
        Self {
            kind: ShapeKind::Torus,
            center,
            r1: major,
            r2: minor,
            orientation,
        }
    }

    /// Characteristic diameter, used for tracing tolerances and error
    /// normalization.
    pub fn diameter(&self) -> f64 {
        match self.kind {
            ShapeKind::Plane => 2.0 * self.r1,
            ShapeKind::Sphere | ShapeKind::Cylinder => 2.0 * self.r1,
            ShapeKind::Torus => 2.0 * (self.r1 + self.r2),
        }
    }

    fn to_local(&self, p: &Point3<f64>) -> Vector3<f64> {
        self.orientation.inverse() * (p - self.center)
    }

    /// Signed distance, negative inside.
    pub fn f(&self, p: &Point3<f64>) -> f64 {
        let q = self.to_local(p);
        match self.kind {
            ShapeKind::Plane => q.z,
            ShapeKind::Sphere => q.norm() - self.r1,
            ShapeKind::Cylinder => (q.x * q.x + q.y * q.y).sqrt() - self.r1,
            ShapeKind::Torus => {
                let ring = (q.x * q.x + q.y * q.y).sqrt() - self.r1;
                (ring * ring + q.z * q.z).sqrt() - self.r2
            }
        }
    }

    /// Exact gradient of `f` (unit length away from the medial axis).
    pub fn gradient(&self, p: &Point3<f64>) -> Vector3<f64> {
        let q = self.to_local(p);
        let local = match self.kind {
            ShapeKind::Plane => Vector3::z(),
            ShapeKind::Sphere => {
                let n = q.norm();
                if n < 1e-300 {
                    Vector3::z()
                } else {
                    q / n
                }
            }
            ShapeKind::Cylinder => {
                let r = (q.x * q.x + q.y * q.y).sqrt();
                if r < 1e-300 {
                    Vector3::x()
                } else {
                    Vector3::new(q.x / r, q.y / r, 0.0)
                }
            }
            ShapeKind::Torus => {
                let r = (q.x * q.x + q.y * q.y).sqrt();
                if r < 1e-300 {
                    return self.orientation * Vector3::z();
                }
                let ring = r - self.r1;
                let d = (ring * ring + q.z * q.z).sqrt();
                if d < 1e-300 {
                    Vector3::z()
                } else {
                    Vector3::new(ring * q.x / (r * d), ring * q.y / (r * d), q.z / d)
                }
            }
        };
        self.orientation * local
    }

    /// Outward unit normal at a surface point.
    pub fn normal(&self, p: &Point3<f64>) -> Vector3<f64> {
        self.gradient(p).normalize()
    }

    /// Sphere-trace the ray `origin + t·dir` (dir unit length). Returns the
    /// hit point, or None if the ray misses within `max_t`. The tolerance is
    /// `1e-7 × diameter`.
    pub fn raycast(&self, origin: &Point3<f64>, dir: &Vector3<f64>, max_t: f64) -> Option<Point3<f64>> {
        let tol = 1e-7 * self.diameter();
        let mut t = 0.0;
        let mut steps = 0;
        while t < max_t && steps < 4096 {
            let p = origin + dir * t;
            let d = self.f(&p);
            if d < tol {
                // Bisection polish against the over-step.
                if d < -tol {
                    let mut lo = (t - 2.0 * tol.max(d.abs())).max(0.0);
                    let mut hi = t;
                    for _ in 0..64 {
                        let mid = 0.5 * (lo + hi);
                        if self.f(&(origin + dir * mid)) > 0.0 {
                            lo = mid;
                        } else {
                            hi = mid;
                        }
                    }
                    return Some(origin + dir * (0.5 * (lo + hi)));
                }
                return Some(p);
            }
            t += d;
            steps += 1;
        }
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sphere_signed_distance_and_gradient() {
        let s = AnalyticShape::sphere(Point3::new(1.0, 2.0, 3.0), 2.0);
        assert!((s.f(&Point3::new(4.0, 2.0, 3.0)) - 1.0).abs() < 1e-12);
        assert!((s.f(&Point3::new(1.0, 2.0, 3.0)) + 2.0).abs() < 1e-12);
        let g = s.gradient(&Point3::new(4.0, 2.0, 3.0));
        assert!((g - Vector3::x()).norm() < 1e-12);
    }

    #[test]
    fn torus_distance_matches_construction() {
        let t = AnalyticShape::torus(Point3::origin(), 3.0, 1.0, UnitQuaternion::identity());
        // Point on the outer equator
        assert!(t.f(&Point3::new(4.0, 0.0, 0.0)).abs() < 1e-12);
        // Ring center line is at distance -1 (deep inside the tube)
        assert!((t.f(&Point3::new(3.0, 0.0, 0.0)) + 1.0).abs() < 1e-12);
        // Tube-top point
        assert!(t.f(&Point3::new(3.0, 0.0, 1.0)).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let shapes = [
            AnalyticShape::sphere(Point3::new(0.3, -0.2, 5.0), 1.7),
            AnalyticShape::torus(
                Point3::new(0.0, 0.1, 4.0),
                2.0,
                0.5,
                UnitQuaternion::from_euler_angles(0.3, -0.4, 0.9),
            ),
            AnalyticShape::cylinder(
                Point3::new(-1.0, 0.0, 6.0),
                1.2,
                UnitQuaternion::from_euler_angles(1.0, 0.2, 0.0),
            ),
            AnalyticShape::plane(
                Point3::new(0.0, 0.0, 3.0),
                UnitQuaternion::from_euler_angles(0.2, 0.1, 0.0),
            ),
        ];
        let h = 1e-6;
        for s in &shapes {
            for p in [
                Point3::new(1.0, 1.5, 2.0),
                Point3::new(-0.4, 0.8, 6.5),
                Point3::new(2.5, -1.0, 4.0),
            ] {
                let g = s.gradient(&p);
                for k in 0..3 {
                    let mut pp = p;
                    let mut pm = p;
                    pp[k] += h;
                    pm[k] -= h;
                    let fd = (s.f(&pp) - s.f(&pm)) / (2.0 * h);
                    assert!(
                        (g[k] - fd).abs() < 1e-6,
                        "{:?} grad[{k}] {} vs fd {}",
                        s.kind,
                        g[k],
                        fd
                    );
                }
            }
        }
    }

    #[test]
    fn raycast_hits_sphere_on_axis() {
        let s = AnalyticShape::sphere(Point3::new(0.0, 0.0, 10.0), 2.0);
        let hit = s
            .raycast(&Point3::origin(), &Vector3::z(), 100.0)
            .expect("hit");
        assert!((hit.z - 8.0).abs() < 1e-6);
        assert!(s
            .raycast(&Point3::new(5.0, 0.0, 0.0), &Vector3::z(), 100.0)
            .is_none());
    }
}

//! Synthetic isotropic BRDFs for the oracle renderer.
//!
//! Values are reflectance factors in the convention
//! `pixel = f(n, l, v) · max(n·l, 0) · V`, so a unit-albedo Lambertian
//! surface has `f = 1`.

use nalgebra::{Point3, Vector3};

/// Smooth spatially varying mixture weight: a hemispherical split of the
/// surface with a soft logistic transition, so two-basis fits see both pure
/// and blended regions.
#[derive(Debug, Clone)]
pub struct MixtureField {
    pub origin: Point3<f64>,
    pub axis: Vector3<f64>,
    /// Transition softness in scene units.
    pub softness: f64,
}

impl MixtureField {
    /// Weight of the first BRDF at surface point `p`, in `(0, 1)`.
    pub fn weight(&self, p: &Point3<f64>) -> f64 {
        let s = self.axis.normalize().dot(&(p - self.origin)) / self.softness;
        1.0 / (1.0 + (-s).exp())
    }
}

#[derive(Debug, Clone)]
pub enum SyntheticBrdf {
    /// `f = albedo`
    Lambertian { albedo: f64 },
    /// `f = diffuse + specular · (n·h)^exponent`
    Blinn {
        diffuse: f64,
        specular: f64,
        exponent: f64,
    },
    /// Spatially varying blend of two isotropic terms.
    Mixture {
        first: Box<SyntheticBrdf>,
        second: Box<SyntheticBrdf>,
        field: MixtureField,
    },
}

impl SyntheticBrdf {
    /// Evaluate the reflectance factor at surface point `p` with unit
    /// vectors `n`, `l`, `v` (light/view pointing away from the surface).
    pub fn eval(&self, p: &Point3<f64>, n: &Vector3<f64>, l: &Vector3<f64>, v: &Vector3<f64>) -> f64 {
        match self {
            SyntheticBrdf::Lambertian { albedo } => *albedo,
            SyntheticBrdf::Blinn {
                diffuse,
                specular,
                exponent,
            } => {
                let h = l + v;
                let hn = h.norm();
                if hn < 1e-12 {
                    return *diffuse;
                }
                let ndh = (n.dot(&h) / hn).clamp(0.0, 1.0);
                diffuse + specular * ndh.powf(*exponent)
            }
            SyntheticBrdf::Mixture {
                first,
                second,
                field,
            } => {
                let w = field.weight(p);
                w * first.eval(p, n, l, v) + (1.0 - w) * second.eval(p, n, l, v)
            }
        }
    }

    /// A two-lobe test material: soft diffuse base vs. shiny lobe, split
    /// across the surface.
    pub fn two_material(origin: Point3<f64>, axis: Vector3<f64>, softness: f64) -> Self {
        SyntheticBrdf::Mixture {
            first: Box::new(SyntheticBrdf::Blinn {
                diffuse: 0.8,
                specular: 0.15,
                exponent: 8.0,
            }),
            second: Box::new(SyntheticBrdf::Blinn {
                diffuse: 0.35,
                specular: 0.9,
                exponent: 60.0,
            }),
            field: MixtureField {
                origin,
                axis,
                softness,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;

    fn rand_unit(rng: &mut impl Rng) -> Vector3<f64> {
        loop {
            let v = Vector3::new(
                rng.random::<f64>() * 2.0 - 1.0,
                rng.random::<f64>() * 2.0 - 1.0,
                rng.random::<f64>() * 2.0 - 1.0,
            );
            let n = v.norm();
            if n > 1e-3 && n <= 1.0 {
                return v / n;
            }
        }
    }

    #[test]
    fn reciprocity_and_isotropy() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let brdf = SyntheticBrdf::two_material(Point3::origin(), Vector3::x(), 0.3);
        let p = Point3::new(0.2, -0.1, 0.4);
        for _ in 0..500 {
            let n = rand_unit(&mut rng);
            let mut l = rand_unit(&mut rng);
            let mut v = rand_unit(&mut rng);
            if n.dot(&l) < 0.0 {
                l = -l;
            }
            if n.dot(&v) < 0.0 {
                v = -v;
            }
            let f = brdf.eval(&p, &n, &l, &v);
            // Reciprocity: swap light and view.
            let f_swap = brdf.eval(&p, &n, &v, &l);
            assert!((f - f_swap).abs() < 1e-12);
            // Isotropy: rotate l and v jointly about n.
            let rot = nalgebra::Rotation3::from_axis_angle(
                &nalgebra::Unit::new_normalize(n),
                rng.random::<f64>() * std::f64::consts::TAU,
            );
            let f_rot = brdf.eval(&p, &n, &(rot * l), &(rot * v));
            assert!((f - f_rot).abs() < 1e-12);
        }
    }
}

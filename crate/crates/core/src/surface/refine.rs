//! Position/normal fusion refinement: vertices minimize a quadratic energy
//! balancing fidelity to their initial positions against measured normal
//! constraints on mesh edges, solved by matrix-free conjugate gradients.

use nalgebra::{Point3, Vector3};

use crate::propagate::OrientedPointSet;

use super::{SurfaceError, TriangleMesh};

/// Refine mesh vertex positions against measured oriented points:
///
/// `min Σ_v λ‖p_v − p_v⁰‖² + Σ_{(u,v)∈E} (n̄_uv · (p_u − p_v))²`
///
/// where `n̄_uv` is the mean of the measured normals nearest to `u` and `v`.
/// Normals are recomputed from the refined mesh.
pub fn refine(
    mesh: &TriangleMesh,
    points: &OrientedPointSet,
    lambda: f64,
) -> Result<TriangleMesh, SurfaceError> {
    if !(lambda > 0.0) {
        return Err(SurfaceError::BadLambda(lambda));
    }
    if mesh.vertices.is_empty() {
        return Err(SurfaceError::EmptyMesh);
    }
    if points.points.is_empty() {
        return Err(SurfaceError::EmptyPoints);
    }
    let nv = mesh.vertices.len();

    // Nearest measured normal per vertex via a spatial hash.
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
    let nearest_normal = |q: &Point3<f64>| -> Vector3<f64> {
        let (kx, ky, kz) = key_of(q);
        let mut best = (f64::MAX, 0usize);
        for ring in 0..64i64 {
            for dz in -ring..=ring {
                for dy in -ring..=ring {
                    for dx in -ring..=ring {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != ring {
                            continue;
                        }
                        if let Some(list) = hash.get(&(kx + dx, ky + dy, kz + dz)) {
                            for &pi in list {
                                let d = (points.points[pi as usize].position - q).norm_squared();
                                if d < best.0 {
                                    best = (d, pi as usize);
                                }
                            }
                        }
                    }
                }
            }
            if best.0.is_finite() && best.0.sqrt() < (ring as f64) * cell {
                break;
            }
        }
        points.points[best.1].normal
    };
    let vertex_normals: Vec<Vector3<f64>> = mesh.vertices.iter().map(|v| nearest_normal(v)).collect();

    // Unique edges with their constraint normals.
    let mut edge_set: std::collections::BTreeSet<(usize, usize)> = std::collections::BTreeSet::new();
    for t in &mesh.triangles {
        for (a, b) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
            edge_set.insert((a.min(b), a.max(b)));
        }
    }
    let edges: Vec<(usize, usize, Vector3<f64>)> = edge_set
        .into_iter()
        .map(|(u, v)| {
            let n = vertex_normals[u] + vertex_normals[v];
            let l = n.norm();
            let n = if l > 1e-12 { n / l } else { vertex_normals[u] };
            (u, v, n)
        })
        .collect();

    // Matrix-free SPD operator: A x = λ x + Σ_e n (n·(x_u − x_v)) on u, −…v.
    let apply = |x: &[Vector3<f64>], out: &mut Vec<Vector3<f64>>| {
        for (o, xi) in out.iter_mut().zip(x.iter()) {
            *o = xi * lambda;
        }
        for (u, v, n) in &edges {
            let r = n.dot(&(x[*u] - x[*v]));
            out[*u] += n * r;
            out[*v] -= n * r;
        }
    };

    let b: Vec<Vector3<f64>> = mesh.vertices.iter().map(|p| p.coords * lambda).collect();
    let mut x: Vec<Vector3<f64>> = mesh.vertices.iter().map(|p| p.coords).collect();

    // Conjugate gradients.
    let mut ax = vec![Vector3::zeros(); nv];
    apply(&x, &mut ax);
    let mut r: Vec<Vector3<f64>> = b.iter().zip(&ax).map(|(bi, axi)| bi - axi).collect();
    let mut p: Vec<Vector3<f64>> = r.clone();
    let dot = |a: &[Vector3<f64>], b: &[Vector3<f64>]| -> f64 {
        a.iter().zip(b).map(|(x, y)| x.dot(y)).sum()
    };
    let mut rs = dot(&r, &r);
    let b_norm = dot(&b, &b).sqrt().max(1e-300);
    let mut ap = vec![Vector3::zeros(); nv];
    for _ in 0..2000 {
        if rs.sqrt() <= 1e-8 * b_norm {
            break;
        }
        apply(&p, &mut ap);
        let alpha = rs / dot(&p, &ap).max(1e-300);
        for i in 0..nv {
            x[i] += p[i] * alpha;
            r[i] -= ap[i] * alpha;
        }
        let rs_new = dot(&r, &r);
        let beta = rs_new / rs;
        for i in 0..nv {
            p[i] = r[i] + p[i] * beta;
        }
        rs = rs_new;
    }

    let mut refined = TriangleMesh {
        vertices: x.into_iter().map(Point3::from).collect(),
        triangles: mesh.triangles.clone(),
        normals: Vec::new(),
    };
    refined.recompute_normals();
    Ok(refined)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::propagate::{OrientedPoint, Provenance};
    use crate::surface::{fuse_points, shape_error, FuseOptions, GtSurface};
    use crate::synth::AnalyticShape;
    use rand::Rng;
    use rand::SeedableRng;

    fn sphere_points(n: usize, radius: f64, seed: u64) -> OrientedPointSet {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let dist = rand_distr::Normal::new(0.0, 1.0).unwrap();
        let points = (0..n)
            .map(|_| {
                let v = Vector3::new(
                    rng.sample::<f64, _>(dist),
                    rng.sample::<f64, _>(dist),
                    rng.sample::<f64, _>(dist),
                )
                .normalize();
                OrientedPoint {
                    position: Point3::from(v * radius),
                    normal: v,
                    views: 5,
                    confidence: 1.0,
                    spread_deg: 0.1,
                    provenance: Provenance::Propagated,
                }
            })
            .collect();
        OrientedPointSet { points }
    }

    #[test]
    fn huge_lambda_is_identity() {
        let cloud = sphere_points(4000, 1.0, 5);
        let mesh = fuse_points(&cloud, 2.0 / 40.0, &FuseOptions::default()).unwrap();
        let out = refine(&mesh, &cloud, 1e6).unwrap();
        for (a, b) in mesh.vertices.iter().zip(out.vertices.iter()) {
            assert!((a - b).norm() < 1e-6);
        }
    }

    #[test]
    fn refinement_reduces_injected_noise() {
        let radius = 1.0;
        let cloud = sphere_points(6000, radius, 6);
        let mesh = fuse_points(&cloud, 2.0 / 48.0, &FuseOptions::default()).unwrap();
        // Inject radial noise of 0.5% radius into the vertices.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        let dist = rand_distr::Normal::new(0.0, 0.005 * radius).unwrap();
        let noisy = TriangleMesh {
            vertices: mesh
                .vertices
                .iter()
                .map(|v| {
                    let dir = v.coords.normalize();
                    Point3::from(v.coords + dir * rng.sample::<f64, _>(dist))
                })
                .collect(),
            triangles: mesh.triangles.clone(),
            normals: mesh.normals.clone(),
        };
        let gt = AnalyticShape::sphere(Point3::origin(), radius);
        let (before, _) = shape_error(&noisy, &GtSurface::Analytic(&gt)).unwrap();
        let refined = refine(&noisy, &cloud, 0.1).unwrap();
        let (after, _) = shape_error(&refined, &GtSurface::Analytic(&gt)).unwrap();
        assert!(
            after.rms < before.rms,
            "refinement did not help: {} -> {}",
            before.rms,
            after.rms
        );
        // Centroid must not drift.
        let drift = (refined.centroid() - noisy.centroid()).norm();
        assert!(drift < (2.0 / 48.0) / 10.0, "centroid drift {drift}");
    }

    #[test]
    fn satisfied_constraints_are_a_fixed_point() {
        // A planar mesh whose edges are all orthogonal to the measured
        // normals: the energy is already zero, so refine must not move it.
        let mut mesh = TriangleMesh::default();
        let n = 12;
        for j in 0..n {
            for i in 0..n {
                mesh.vertices
                    .push(Point3::new(i as f64 * 0.1, j as f64 * 0.1, 0.3));
            }
        }
        for j in 0..n - 1 {
            for i in 0..n - 1 {
                let a = j * n + i;
                mesh.triangles.push([a, a + 1, a + n]);
                mesh.triangles.push([a + 1, a + n + 1, a + n]);
            }
        }
        mesh.recompute_normals();
        let points = OrientedPointSet {
            points: (0..40)
                .map(|i| OrientedPoint {
                    position: Point3::new(0.025 * i as f64, 0.55, 0.3),
                    normal: Vector3::z(),
                    views: 4,
                    confidence: 1.0,
                    spread_deg: 0.0,
                    provenance: Provenance::Propagated,
                })
                .collect(),
        };
        let out = refine(&mesh, &points, 0.1).unwrap();
        for (a, b) in mesh.vertices.iter().zip(out.vertices.iter()) {
            assert!((a - b).norm() < 1e-9, "{a:?} moved to {b:?}");
        }
    }

    #[test]
    fn non_positive_lambda_errors() {
        let cloud = sphere_points(200, 1.0, 1);
        let mesh = fuse_points(&cloud, 2.0 / 24.0, &FuseOptions::default()).unwrap();
        assert!(refine(&mesh, &cloud, 0.0).is_err());
        assert!(refine(&mesh, &cloud, -1.0).is_err());
    }
}

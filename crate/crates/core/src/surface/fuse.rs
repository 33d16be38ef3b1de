//! Signed-distance splatting of oriented points and iso-surface extraction
//! by tetrahedral decomposition of the voxel cells (Kuhn 6-tet split, which
//! is translation-consistent, so neighboring cells share face diagonals and
//! the extracted surface is watertight).

use nalgebra::{Point3, Vector3};
use rayon::prelude::*;

use crate::propagate::OrientedPointSet;

use super::{SurfaceError, TriangleMesh};

#[derive(Debug, Clone, Copy)]
pub struct FuseOptions {
    /// Gather radius in voxels.
    pub radius_voxels: f64,
    /// Gaussian σ in voxels.
    pub sigma_voxels: f64,
    /// Minimum total weight for a voxel to carry a field value.
    pub min_weight: f64,
}

impl Default for FuseOptions {
    fn default() -> Self {
        Self {
            radius_voxels: 3.0,
            sigma_voxels: 1.5,
            min_weight: 1e-6,
        }
    }
}

/// Cube corner offsets, vertex k of cell (x, y, z) is at (x, y, z) + CUBE[k].
const CUBE: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

/// Kuhn decomposition: six tetrahedra around the main diagonal v0–v6, one
/// per monotone lattice path.
const TETS: [[usize; 4]; 6] = [
    [0, 1, 2, 6],
    [0, 1, 5, 6],
    [0, 3, 2, 6],
    [0, 3, 7, 6],
    [0, 4, 5, 6],
    [0, 4, 7, 6],
];

/// Fuse oriented points into a watertight triangle mesh. The signed distance
/// at a voxel is the Gaussian-weighted mean of `n·(v − p)` over points
/// within the gather radius; the zero level set is extracted and the largest
/// connected component kept.
pub fn fuse_points(
    points: &OrientedPointSet,
    voxel_size: f64,
    options: &FuseOptions,
) -> Result<TriangleMesh, SurfaceError> {
    if points.points.is_empty() {
        return Err(SurfaceError::EmptyPoints);
    }
    if !(voxel_size > 0.0) {
        return Err(SurfaceError::BadVoxelSize(voxel_size));
    }
    let pad = options.radius_voxels.ceil() as i64 + 2;
    let mut lo = Point3::new(f64::MAX, f64::MAX, f64::MAX);
    let mut hi = Point3::new(f64::MIN, f64::MIN, f64::MIN);
    for p in &points.points {
        for k in 0..3 {
            lo[k] = lo[k].min(p.position[k]);
            hi[k] = hi[k].max(p.position[k]);
        }
    }
    let origin = Point3::new(
        lo.x - pad as f64 * voxel_size,
        lo.y - pad as f64 * voxel_size,
        lo.z - pad as f64 * voxel_size,
    );
    let dims = [
        (((hi.x - origin.x) / voxel_size).ceil() as usize + pad as usize + 1).max(2),
        (((hi.y - origin.y) / voxel_size).ceil() as usize + pad as usize + 1).max(2),
        (((hi.z - origin.z) / voxel_size).ceil() as usize + pad as usize + 1).max(2),
    ];

    // Spatial hash of point indices by voxel cell, filled in point order so
    // gathers accumulate deterministically.
    let mut hash: std::collections::HashMap<(i64, i64, i64), Vec<u32>> =
        std::collections::HashMap::new();
    for (pi, p) in points.points.iter().enumerate() {
        let key = (
            ((p.position.x - origin.x) / voxel_size).floor() as i64,
            ((p.position.y - origin.y) / voxel_size).floor() as i64,
            ((p.position.z - origin.z) / voxel_size).floor() as i64,
        );
        hash.entry(key).or_default().push(pi as u32);
    }

    let r = options.radius_voxels;
    let r_cells = r.ceil() as i64;
    let inv_two_sigma2 = 1.0 / (2.0 * options.sigma_voxels * options.sigma_voxels);
    // Field gather, parallel over z-slabs; per-voxel accumulation order is
    // fixed by (cell, point index), independent of the schedule.
    let slab: Vec<Vec<f64>> = (0..dims[2])
        .into_par_iter()
        .map(|z| {
            let mut row = vec![f64::NAN; dims[0] * dims[1]];
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let v = Point3::new(
                        origin.x + x as f64 * voxel_size,
                        origin.y + y as f64 * voxel_size,
                        origin.z + z as f64 * voxel_size,
                    );
                    let mut acc = 0.0;
                    let mut wsum = 0.0;
                    for dz in -r_cells..=r_cells {
                        for dy in -r_cells..=r_cells {
                            for dx in -r_cells..=r_cells {
                                let key = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                                let Some(list) = hash.get(&key) else { continue };
                                for &pi in list {
                                    let p = &points.points[pi as usize];
                                    let d = v - p.position;
                                    let dist_vox = d.norm() / voxel_size;
                                    if dist_vox > r {
                                        continue;
                                    }
                                    let w = (-dist_vox * dist_vox * inv_two_sigma2).exp();
                                    acc += w * p.normal.dot(&d);
                                    wsum += w;
                                }
                            }
                        }
                    }
                    if wsum > options.min_weight {
                        row[y * dims[0] + x] = acc / wsum;
                    }
                }
            }
            row
        })
        .collect();
    let field = |x: usize, y: usize, z: usize| -> f64 { slab[z][y * dims[0] + x] };

    let mut any_pos = false;
    let mut any_neg = false;
    for z in 0..dims[2] {
        for i in &slab[z] {
            if i.is_finite() {
                if *i > 0.0 {
                    any_pos = true;
                } else if *i < 0.0 {
                    any_neg = true;
                }
            }
        }
    }
    if !any_neg {
        return Err(SurfaceError::NoSurface("positive"));
    }
    if !any_pos {
        return Err(SurfaceError::NoSurface("negative"));
    }

    // March the cells: emit triangles per tetrahedron, deduplicating
    // vertices by lattice edge.
    let gid = |x: usize, y: usize, z: usize| -> u64 {
        ((z * dims[1] + y) * dims[0] + x) as u64
    };
    let mut edge_vertices: std::collections::HashMap<(u64, u64), usize> =
        std::collections::HashMap::new();
    let mut mesh = TriangleMesh::default();
    let corner_pos = |x: usize, y: usize, z: usize| -> Point3<f64> {
        Point3::new(
            origin.x + x as f64 * voxel_size,
            origin.y + y as f64 * voxel_size,
            origin.z + z as f64 * voxel_size,
        )
    };
    for z in 0..dims[2] - 1 {
        for y in 0..dims[1] - 1 {
            for x in 0..dims[0] - 1 {
                let mut vals = [0.0f64; 8];
                let mut ids = [0u64; 8];
                let mut pos = [Point3::origin(); 8];
                let mut valid = true;
                for (k, off) in CUBE.iter().enumerate() {
                    let (cx, cy, cz) = (x + off[0], y + off[1], z + off[2]);
                    let f = field(cx, cy, cz);
                    if !f.is_finite() {
                        valid = false;
                        break;
                    }
                    vals[k] = f;
                    ids[k] = gid(cx, cy, cz);
                    pos[k] = corner_pos(cx, cy, cz);
                }
                if !valid {
                    continue;
                }
                for tet in &TETS {
                    march_tet(
                        &mut mesh,
                        &mut edge_vertices,
                        [vals[tet[0]], vals[tet[1]], vals[tet[2]], vals[tet[3]]],
                        [ids[tet[0]], ids[tet[1]], ids[tet[2]], ids[tet[3]]],
                        [pos[tet[0]], pos[tet[1]], pos[tet[2]], pos[tet[3]]],
                    );
                }
            }
        }
    }
    if mesh.triangles.is_empty() {
        return Err(SurfaceError::NoSurface("crossing-free"));
    }
    mesh.clean();
    mesh.keep_largest_component();
    mesh.recompute_normals();
    Ok(mesh)
}

/// Emit the iso-surface triangles of one tetrahedron. Inside = negative.
fn march_tet(
    mesh: &mut TriangleMesh,
    edge_vertices: &mut std::collections::HashMap<(u64, u64), usize>,
    vals: [f64; 4],
    ids: [u64; 4],
    pos: [Point3<f64>; 4],
) {
    let inside: Vec<usize> = (0..4).filter(|&i| vals[i] < 0.0).collect();
    if inside.is_empty() || inside.len() == 4 {
        return;
    }
    let outside: Vec<usize> = (0..4).filter(|&i| vals[i] >= 0.0).collect();
    let mut edge_vertex = |a: usize, b: usize| -> usize {
        let key = if ids[a] < ids[b] {
            (ids[a], ids[b])
        } else {
            (ids[b], ids[a])
        };
        if let Some(&vi) = edge_vertices.get(&key) {
            return vi;
        }
        // Deterministic interpolation independent of (a, b) order.
        let (lo, hi, vlo, vhi) = if ids[a] < ids[b] {
            (pos[a], pos[b], vals[a], vals[b])
        } else {
            (pos[b], pos[a], vals[b], vals[a])
        };
        let t = if (vhi - vlo).abs() < 1e-300 {
            0.5
        } else {
            (vlo / (vlo - vhi)).clamp(1e-9, 1.0 - 1e-9)
        };
        let p = lo + (hi - lo) * t;
        let vi = mesh.vertices.len();
        mesh.vertices.push(p);
        edge_vertices.insert(key, vi);
        vi
    };
    // Orientation reference: from the negative side toward the positive side.
    let push_tri = |mesh_tri: [usize; 3], mesh: &mut TriangleMesh, toward_pos: Vector3<f64>| {
        let a = mesh.vertices[mesh_tri[0]];
        let b = mesh.vertices[mesh_tri[1]];
        let c = mesh.vertices[mesh_tri[2]];
        let n = (b - a).cross(&(c - a));
        if n.dot(&toward_pos) >= 0.0 {
            mesh.triangles.push(mesh_tri);
        } else {
            mesh.triangles.push([mesh_tri[0], mesh_tri[2], mesh_tri[1]]);
        }
    };
    let centroid = |set: &[usize]| -> Vector3<f64> {
        let mut c = Vector3::zeros();
        for &i in set {
            c += pos[i].coords;
        }
        c / set.len() as f64
    };
    let toward_pos = centroid(&outside) - centroid(&inside);
    match inside.len() {
        1 => {
            let i = inside[0];
            let v0 = edge_vertex(i, outside[0]);
            let v1 = edge_vertex(i, outside[1]);
            let v2 = edge_vertex(i, outside[2]);
            push_tri([v0, v1, v2], mesh, toward_pos);
        }
        3 => {
            let o = outside[0];
            let v0 = edge_vertex(o, inside[0]);
            let v1 = edge_vertex(o, inside[1]);
            let v2 = edge_vertex(o, inside[2]);
            push_tri([v0, v1, v2], mesh, toward_pos);
        }
        2 => {
            let (i0, i1) = (inside[0], inside[1]);
            let (o0, o1) = (outside[0], outside[1]);
            let a = edge_vertex(i0, o0);
            let b = edge_vertex(i0, o1);
            let c = edge_vertex(i1, o0);
            let d = edge_vertex(i1, o1);
            push_tri([a, b, c], mesh, toward_pos);
            push_tri([b, d, c], mesh, toward_pos);
        }
        _ => unreachable!(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::propagate::{OrientedPoint, Provenance};
    use crate::surface::{shape_error, GtSurface};
    use crate::synth::AnalyticShape;
    use rand::Rng;
    use rand::SeedableRng;

    fn point(p: Point3<f64>, n: Vector3<f64>) -> OrientedPoint {
        OrientedPoint {
            position: p,
            normal: n,
            views: 5,
            confidence: 1.0,
            spread_deg: 0.5,
            provenance: Provenance::Propagated,
        }
    }

    fn sphere_cloud(n: usize, radius: f64, noise: f64, seed: u64) -> OrientedPointSet {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let normal = rand_distr::Normal::new(0.0, 1.0).unwrap();
        let mut points = Vec::with_capacity(n);
        for _ in 0..n {
            let v = Vector3::new(
                rng.sample::<f64, _>(normal),
                rng.sample::<f64, _>(normal),
                rng.sample::<f64, _>(normal),
            )
            .normalize();
            let r = radius + noise * rng.sample::<f64, _>(normal);
            points.push(point(Point3::from(v * r), v));
        }
        OrientedPointSet { points }
    }

    #[test]
    fn empty_input_errors() {
        let r = fuse_points(&OrientedPointSet::default(), 0.1, &FuseOptions::default());
        assert!(matches!(r, Err(SurfaceError::EmptyPoints)));
    }

    #[test]
    fn plane_cloud_reconstructs_flat() {
        let mut points = Vec::new();
        for i in 0..40 {
            for j in 0..40 {
                points.push(point(
                    Point3::new(i as f64 * 0.05, j as f64 * 0.05, 0.0),
                    Vector3::z(),
                ));
            }
        }
        let set = OrientedPointSet { points };
        let voxel = 0.1;
        let mesh = fuse_points(&set, voxel, &FuseOptions::default()).unwrap();
        assert!(!mesh.triangles.is_empty());
        // Interior vertices must lie within voxel/10 of the plane z=0.
        let mut checked = 0;
        for v in &mesh.vertices {
            if v.x > 0.4 && v.x < 1.6 && v.y > 0.4 && v.y < 1.6 {
                assert!(v.z.abs() < voxel / 10.0, "vertex off plane: {v:?}");
                checked += 1;
            }
        }
        assert!(checked > 50);
    }

    #[test]
    fn sphere_cloud_radial_error_below_half_voxel() {
        let radius = 1.0;
        let cloud = sphere_cloud(10_000, radius, 0.01 * radius, 7);
        let voxel = 2.0 * radius / 64.0;
        let mesh = fuse_points(&cloud, voxel, &FuseOptions::default()).unwrap();
        let gt = AnalyticShape::sphere(Point3::origin(), radius);
        let (stats, _) = shape_error(&mesh, &GtSurface::Analytic(&gt)).unwrap();
        assert!(
            stats.rms < voxel / 2.0,
            "rms {} vs voxel/2 {}",
            stats.rms,
            voxel / 2.0
        );
    }

    #[test]
    fn point_order_invariance_within_tolerance() {
        let cloud = sphere_cloud(3000, 1.0, 0.005, 11);
        let voxel = 2.0 / 48.0;
        let mesh_a = fuse_points(&cloud, voxel, &FuseOptions::default()).unwrap();
        let mut reversed = cloud.clone();
        reversed.points.reverse();
        let mesh_b = fuse_points(&reversed, voxel, &FuseOptions::default()).unwrap();
        assert_eq!(mesh_a.vertices.len(), mesh_b.vertices.len());
        for (a, b) in mesh_a.vertices.iter().zip(mesh_b.vertices.iter()) {
            assert!((a - b).norm() < 1e-9);
        }
    }

    #[test]
    fn watertight_no_boundary_edges() {
        let cloud = sphere_cloud(5000, 1.0, 0.0, 3);
        let mesh = fuse_points(&cloud, 2.0 / 40.0, &FuseOptions::default()).unwrap();
        // Every edge must be used by exactly two triangles.
        let mut edge_count: std::collections::HashMap<(usize, usize), usize> =
            std::collections::HashMap::new();
        for t in &mesh.triangles {
            for (a, b) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
                let key = (a.min(b), a.max(b));
                *edge_count.entry(key).or_default() += 1;
            }
        }
        let boundary = edge_count.values().filter(|&&c| c != 2).count();
        assert_eq!(
            boundary, 0,
            "found {boundary} non-manifold edges of {}",
            edge_count.len()
        );
    }
}

//! Synthetic scene oracle.
//!
//! Renders photometric-stereo stacks of analytic implicit shapes under the
//! same light-rig model the reconstruction consumes, and emits exact
//! ground-truth depth/normal/azimuth maps. Every reconstruction stage is
//! validated against these renders.

mod brdf;
mod render;
mod shape;

pub use brdf::{MixtureField, SyntheticBrdf};
pub use render::{render_stack, GroundTruth, ImageStack, RenderError, RenderOptions};
pub use shape::{AnalyticShape, ShapeKind};

use nalgebra::{Point2, Point3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::camera::CameraModel;
use crate::img::Grid;
use crate::math::fold_mod_pi;

/// Per-pixel azimuth of the normal map in `[0, π)`: `atan2(n_y, n_x) mod π`.
/// NaN where the normal projects (almost) to a point, i.e. fronto-parallel.
pub fn ground_truth_azimuth(normals: &Grid<[f64; 3]>, mask: &Grid<bool>) -> Grid<f64> {
    Grid::from_fn(normals.width(), normals.height(), |x, y| {
        if !mask.get(x, y) {
            return f64::NAN;
        }
        let n = normals.get(x, y);
        if n[0] * n[0] + n[1] * n[1] < 1e-12 {
            return f64::NAN;
        }
        fold_mod_pi(n[1].atan2(n[0]))
    })
}

#[derive(Debug, thiserror::Error)]
pub enum SeedError {
    #[error("requested {requested} seed points but only {available} masked pixels exist")]
    NotEnoughPixels { requested: usize, available: usize },
}

/// Sample sparse 3D seed points on the ground-truth surface: `count` pixels
/// drawn uniformly over the masked pixels of all views, back-projected with
/// the GT depth and perturbed by isotropic Gaussian noise. Deterministic for
/// a fixed RNG seed.
pub fn seed_points(
    gts: &[(CameraModel, GroundTruth)],
    count: usize,
    jitter_sigma: f64,
    rng_seed: u64,
) -> Result<Vec<Point3<f64>>, SeedError> {
    assert!(count >= 1);
    assert!(jitter_sigma >= 0.0);
    let mut pool: Vec<(usize, usize, usize)> = Vec::new();
    for (vi, (_, gt)) in gts.iter().enumerate() {
        for y in 0..gt.mask.height() {
            for x in 0..gt.mask.width() {
                if gt.mask.get(x, y) && gt.depth.get(x, y).is_finite() {
                    pool.push((vi, x, y));
                }
            }
        }
    }
    if pool.len() < count {
        return Err(SeedError::NotEnoughPixels {
            requested: count,
            available: pool.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let normal = rand_distr::Normal::new(0.0, 1.0).unwrap();
    let mut seeds = Vec::with_capacity(count);
    for _ in 0..count {
        let (vi, x, y) = pool[rng.random_range(0..pool.len())];
        let (cam, gt) = &gts[vi];
        let depth = gt.depth.get(x, y);
        let mut p = cam.backproject(&Point2::new(x as f64, y as f64), depth);
        if jitter_sigma > 0.0 {
            for k in 0..3 {
                p[k] += jitter_sigma * rng.sample::<f64, _>(normal);
            }
        }
        seeds.push(p);
    }
    Ok(seeds)
}

/// Write seeds in the `seeds.txt` format: `x y z [reprojection_error]`.
pub fn write_seeds_txt(path: &std::path::Path, seeds: &[Point3<f64>]) -> std::io::Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for s in seeds {
        writeln!(f, "{:.17e} {:.17e} {:.17e}", s.x, s.y, s.z)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::img::Grid;

    #[test]
    fn azimuth_of_tilted_normal() {
        let n = [1.0, 0.0, -0.5];
        let len = (1.0f64 + 0.25).sqrt();
        let normals = Grid::from_fill(1, 1, [n[0] / len, n[1] / len, n[2] / len]);
        let mask = Grid::from_fill(1, 1, true);
        let az = ground_truth_azimuth(&normals, &mask);
        assert!(az.get(0, 0).abs() < 1e-12);
    }

    #[test]
    fn azimuth_of_fronto_parallel_is_nan() {
        let normals = Grid::from_fill(1, 1, [0.0, 0.0, -1.0]);
        let mask = Grid::from_fill(1, 1, true);
        let az = ground_truth_azimuth(&normals, &mask);
        assert!(az.get(0, 0).is_nan());
    }
}

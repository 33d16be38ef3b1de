//! Tri-variate isotropic BRDF capture.
//!
//! Observations of every surface point are parameterized by Rusinkiewicz
//! half/difference angles (θ_h, θ_d, φ), binned into a 90×2×5 table over
//! `[0, π/2]³`, assembled into an observation matrix with missing entries,
//! and factorized into K basis BRDFs with per-point nonnegative mixing
//! weights by ACLS. A two-phase scheme fits the basis on precisely
//! reconstructed points first, then solves weights everywhere.

mod acls;
mod nnls;
pub mod raster;

pub use acls::{acls_factorize, observed_relative_residual, AclsError, AclsOptions, AclsResult};
pub use nnls::{nnls, nnls_normal};

use nalgebra::{DMatrix, DVector, Point3, Vector3};
use rayon::prelude::*;
use thiserror::Error;

use crate::camera::{CameraModel, Intrinsics};
use crate::img::Grid;
use crate::surface::TriangleMesh;

pub const N_THETA_H: usize = 90;
pub const N_THETA_D: usize = 2;
pub const N_PHI: usize = 5;
pub const N_BINS: usize = N_THETA_H * N_THETA_D * N_PHI;

#[derive(Debug, Error)]
pub enum ReflectanceError {
    #[error("light and view are antipodal; the half vector is undefined")]
    HalfVectorUndefined,
    #[error("back-facing configuration (n·l or n·v ≤ 0)")]
    BackFacing,
    #[error("angle {angle} out of the [0, π/2] bin range")]
    OutOfRange { angle: f64 },
    #[error("no valid observations were gathered")]
    NoObservations,
    #[error(transparent)]
    Acls(#[from] AclsError),
}

/// Rusinkiewicz coordinates of a (normal, light, view) configuration:
/// θ_h = ∠(n, h), θ_d = ∠(h, l), φ = azimuth of the difference vector about
/// h measured from the n–h plane, folded into [0, π/2] by isotropy and
/// reciprocity.
pub fn rusinkiewicz_coords(
    n: &Vector3<f64>,
    l: &Vector3<f64>,
    v: &Vector3<f64>,
) -> Result<(f64, f64, f64), ReflectanceError> {
    if n.dot(l) <= 0.0 || n.dot(v) <= 0.0 {
        return Err(ReflectanceError::BackFacing);
    }
    let h = l + v;
    let hn = h.norm();
    if hn < 1e-9 {
        return Err(ReflectanceError::HalfVectorUndefined);
    }
    let h = h / hn;
    let theta_h = n.dot(&h).clamp(-1.0, 1.0).acos();
    let theta_d = h.dot(l).clamp(-1.0, 1.0).acos();
    // Azimuth of l's component ⊥ h, measured from n's component ⊥ h.
    let l_perp = l - h * l.dot(&h);
    let n_perp = n - h * n.dot(&h);
    let phi = if l_perp.norm() < 1e-9 || n_perp.norm() < 1e-9 {
        0.0
    } else {
        let reference = n_perp.normalize();
        let target = l_perp.normalize();
        let sin = h.dot(&reference.cross(&target));
        let cos = reference.dot(&target);
        let raw = sin.atan2(cos);
        // Reciprocity folds φ mod π; bilateral symmetry folds onto [0, π/2].
        let folded = crate::math::fold_mod_pi(raw);
        if folded > std::f64::consts::FRAC_PI_2 {
            std::f64::consts::PI - folded
        } else {
            folded
        }
    };
    Ok((theta_h, theta_d, phi))
}

/// Flat bin index of a coordinate triple: θ_h·(2·5) + θ_d·5 + φ, uniform
/// bins over [0, π/2], right edge clamped into the last bin.
pub fn bin_index(theta_h: f64, theta_d: f64, phi: f64) -> Result<usize, ReflectanceError> {
    let half_pi = std::f64::consts::FRAC_PI_2;
    let sub = |angle: f64, n: usize| -> Result<usize, ReflectanceError> {
        if !(-1e-9..=half_pi + 1e-9).contains(&angle) {
            return Err(ReflectanceError::OutOfRange { angle });
        }
        Ok(((angle / half_pi * n as f64).floor() as usize).min(n - 1))
    };
    Ok(sub(theta_h, N_THETA_H)? * (N_THETA_D * N_PHI) + sub(theta_d, N_THETA_D)? * N_PHI
        + sub(phi, N_PHI)?)
}

/// Bin center angles of a flat index.
pub fn bin_center(index: usize) -> (f64, f64, f64) {
    let half_pi = std::f64::consts::FRAC_PI_2;
    let th = index / (N_THETA_D * N_PHI);
    let td = (index / N_PHI) % N_THETA_D;
    let ph = index % N_PHI;
    (
        (th as f64 + 0.5) / N_THETA_H as f64 * half_pi,
        (td as f64 + 0.5) / N_THETA_D as f64 * half_pi,
        (ph as f64 + 0.5) / N_PHI as f64 * half_pi,
    )
}

/// One tabulated isotropic BRDF (900 nonnegative entries).
#[derive(Debug, Clone)]
pub struct BrdfTable {
    pub values: Vec<f64>,
}

impl BrdfTable {
    pub fn constant(value: f64) -> Self {
        Self {
            values: vec![value; N_BINS],
        }
    }

    /// Table lookup with linear interpolation across θ_h bin centers and
    /// nearest-bin selection for θ_d and φ.
    pub fn sample(&self, theta_h: f64, theta_d: f64, phi: f64) -> f64 {
        let half_pi = std::f64::consts::FRAC_PI_2;
        let nearest = |angle: f64, n: usize| -> usize {
            (((angle / half_pi * n as f64) - 0.5).round().max(0.0) as usize).min(n - 1)
        };
        let td = nearest(theta_d, N_THETA_D);
        let ph = nearest(phi, N_PHI);
        let pos = (theta_h / half_pi * N_THETA_H as f64 - 0.5)
            .clamp(0.0, (N_THETA_H - 1) as f64);
        let t0 = pos.floor() as usize;
        let t1 = (t0 + 1).min(N_THETA_H - 1);
        let f = pos - t0 as f64;
        let at = |t: usize| self.values[t * (N_THETA_D * N_PHI) + td * N_PHI + ph];
        (1.0 - f) * at(t0) + f * at(t1)
    }
}

/// A spatially varying BRDF: K basis tables plus per-point mixing weights.
#[derive(Debug, Clone)]
pub struct Svbrdf {
    pub basis: Vec<BrdfTable>,
    /// Row-major N×K weights.
    pub weights: Vec<f64>,
    pub k: usize,
    /// Rows that had no observations (their weights are the mean weights).
    pub unfitted: Vec<bool>,
}

impl Svbrdf {
    pub fn eval(&self, point: usize, theta_h: f64, theta_d: f64, phi: f64) -> f64 {
        (0..self.k)
            .map(|kk| self.weights[point * self.k + kk] * self.basis[kk].sample(theta_h, theta_d, phi))
            .sum()
    }
}

/// Dense observation matrix: per-point mean BRDF value per bin, with an
/// observed mask.
#[derive(Debug, Clone)]
pub struct ObservationMatrix {
    /// Row-major N×900.
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
    pub rows: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct ObservationOptions {
    /// Views more slanted than this against the normal are skipped.
    pub max_view_angle_deg: f64,
    /// Occlusion tolerance as a fraction of the mesh diagonal.
    pub occlusion_tol_rel: f64,
}

impl Default for ObservationOptions {
    fn default() -> Self {
        Self {
            max_view_angle_deg: 40.0,
            occlusion_tol_rel: 2e-2,
        }
    }
}

/// One calibrated view for observation gathering.
pub struct ObsView<'a> {
    pub camera: &'a CameraModel,
    pub images: &'a [Grid<f32>],
    pub mask: &'a Grid<bool>,
}

/// Build the observation matrix for the mesh vertices. `light_of(view, led,
/// p_world)` supplies the unit light direction (toward the light) and the
/// lighting intensity V at the point; observations are normalized as
/// `I / (V · n·l)` and averaged per bin.
pub fn build_observation_matrix(
    mesh: &TriangleMesh,
    views: &[ObsView],
    light_of: &(dyn Fn(usize, usize, &Point3<f64>) -> Option<(Vector3<f64>, f64)> + Sync),
    options: &ObservationOptions,
) -> Result<ObservationMatrix, ReflectanceError> {
    let n = mesh.vertices.len();
    let mut lo = Point3::new(f64::MAX, f64::MAX, f64::MAX);
    let mut hi = Point3::new(f64::MIN, f64::MIN, f64::MIN);
    for v in &mesh.vertices {
        for k in 0..3 {
            lo[k] = lo[k].min(v[k]);
            hi[k] = hi[k].max(v[k]);
        }
    }
    let occlusion_tol = (hi - lo).norm() * options.occlusion_tol_rel;
    let rasters: Vec<raster::RasterMap> = views
        .par_iter()
        .map(|v| raster::rasterize(mesh, v.camera))
        .collect();
    let cos_max = options.max_view_angle_deg.to_radians().cos();

    let rows: Vec<(Vec<f64>, Vec<u32>)> = (0..n)
        .into_par_iter()
        .map(|vi| {
            let p = mesh.vertices[vi];
            let normal = mesh.normals[vi];
            let mut sums = vec![0.0f64; N_BINS];
            let mut counts = vec![0u32; N_BINS];
            for (view_idx, view) in views.iter().enumerate() {
                let view_dir = match view.camera.intrinsics {
                    Intrinsics::Orthographic { .. } => {
                        let (_, _, z) = view.camera.axes_world();
                        -z
                    }
                    Intrinsics::Perspective { .. } => (view.camera.center() - p).normalize(),
                };
                let cos_view = normal.dot(&view_dir);
                if cos_view < cos_max {
                    continue;
                }
                let Ok(px) = view.camera.project(&p) else {
                    continue;
                };
                let xi = px.x.round() as i64;
                let yi = px.y.round() as i64;
                if !view.mask.at(xi, yi) {
                    continue;
                }
                if !raster::visible(&rasters[view_idx], view.camera, &p, occlusion_tol) {
                    continue;
                }
                for (led, img) in view.images.iter().enumerate() {
                    let Some((l, v_int)) = light_of(view_idx, led, &p) else {
                        continue;
                    };
                    let ndl = normal.dot(&l);
                    if ndl <= 1e-6 || v_int <= 0.0 {
                        continue;
                    }
                    let intensity = img.bilinear(px.x, px.y);
                    if !intensity.is_finite() {
                        continue;
                    }
                    let Ok((th, td, ph)) = rusinkiewicz_coords(&normal, &l, &view_dir) else {
                        continue;
                    };
                    let Ok(bin) = bin_index(th, td, ph) else {
                        continue;
                    };
                    sums[bin] += intensity / (v_int * ndl);
                    counts[bin] += 1;
                }
            }
            (sums, counts)
        })
        .collect();

    let mut values = vec![0.0f64; n * N_BINS];
    let mut mask = vec![false; n * N_BINS];
    let mut any = false;
    for (vi, (sums, counts)) in rows.into_iter().enumerate() {
        for b in 0..N_BINS {
            if counts[b] > 0 {
                values[vi * N_BINS + b] = sums[b] / counts[b] as f64;
                mask[vi * N_BINS + b] = true;
                any = true;
            }
        }
    }
    if !any {
        return Err(ReflectanceError::NoObservations);
    }
    Ok(ObservationMatrix {
        values,
        mask,
        rows: n,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct FitOptions {
    pub k: usize,
    /// Points with normal spread at most this (degrees) fit the basis.
    pub precise_spread_deg: f64,
    pub acls: AclsOptions,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            k: 2,
            precise_spread_deg: 1.5,
            acls: AclsOptions {
                brdf_layout: true,
                ..Default::default()
            },
        }
    }
}

/// Two-phase SVBRDF fit: the basis comes from rows whose reconstruction is
/// precise (normal spread within the threshold), then weights are solved
/// everywhere with the basis frozen. Each basis is rescaled to unit mean
/// over the observed bins, weights inversely.
pub fn fit_svbrdf(
    obs: &ObservationMatrix,
    spreads: &[f64],
    options: &FitOptions,
) -> Result<Svbrdf, ReflectanceError> {
    assert_eq!(spreads.len(), obs.rows);
    let k = options.k;
    let precise: Vec<usize> = (0..obs.rows)
        .filter(|&i| spreads[i] <= options.precise_spread_deg)
        .filter(|&i| (0..N_BINS).any(|b| obs.mask[i * N_BINS + b]))
        .collect();
    let subset: Vec<usize> = if precise.len() < 10 * k {
        (0..obs.rows).collect()
    } else {
        precise
    };
    // Phase 1: basis from the precise subset.
    let mut sub_values = Vec::with_capacity(subset.len() * N_BINS);
    let mut sub_mask = Vec::with_capacity(subset.len() * N_BINS);
    for &i in &subset {
        sub_values.extend_from_slice(&obs.values[i * N_BINS..(i + 1) * N_BINS]);
        sub_mask.extend_from_slice(&obs.mask[i * N_BINS..(i + 1) * N_BINS]);
    }
    let phase1 = acls_factorize(&sub_values, &sub_mask, subset.len(), N_BINS, k, &options.acls)?;
    let h = phase1.h;

    // Phase 2: weights for every row with H fixed.
    let weights_rows: Vec<(Vec<f64>, bool)> = (0..obs.rows)
        .into_par_iter()
        .map(|i| {
            let mut ata = DMatrix::<f64>::zeros(k, k);
            let mut atb = DVector::<f64>::zeros(k);
            let mut any = false;
            for j in 0..N_BINS {
                if !obs.mask[i * N_BINS + j] {
                    continue;
                }
                any = true;
                for a in 0..k {
                    let ha = h[a * N_BINS + j];
                    atb[a] += ha * obs.values[i * N_BINS + j];
                    for b in a..k {
                        ata[(a, b)] += ha * h[b * N_BINS + j];
                    }
                }
            }
            for a in 0..k {
                for b in 0..a {
                    ata[(a, b)] = ata[(b, a)];
                }
            }
            if any {
                let w = nnls_normal(&ata, &atb, 1e-10);
                ((0..k).map(|kk| w[kk]).collect(), false)
            } else {
                (vec![0.0; k], true)
            }
        })
        .collect();

    let mut weights = Vec::with_capacity(obs.rows * k);
    let mut unfitted = Vec::with_capacity(obs.rows);
    for (row, empty) in &weights_rows {
        weights.extend_from_slice(row);
        unfitted.push(*empty);
    }
    // Unfitted rows render with the mean weights.
    let fitted = unfitted.iter().filter(|&&e| !e).count().max(1) as f64;
    let mut mean_w = vec![0.0; k];
    for (i, empty) in unfitted.iter().enumerate() {
        if !empty {
            for kk in 0..k {
                mean_w[kk] += weights[i * k + kk] / fitted;
            }
        }
    }
    for (i, empty) in unfitted.iter().enumerate() {
        if *empty {
            weights[i * k..(i + 1) * k].copy_from_slice(&mean_w);
        }
    }

    // Rescale: unit mean of each basis over the observed bins.
    let observed_bins: Vec<usize> = (0..N_BINS)
        .filter(|&b| (0..obs.rows).any(|i| obs.mask[i * N_BINS + b]))
        .collect();
    let mut basis = Vec::with_capacity(k);
    let mut scaled_weights = weights;
    for kk in 0..k {
        let mean: f64 = observed_bins
            .iter()
            .map(|&b| h[kk * N_BINS + b])
            .sum::<f64>()
            / observed_bins.len().max(1) as f64;
        let scale = if mean > 1e-12 { mean } else { 1.0 };
        basis.push(BrdfTable {
            values: (0..N_BINS).map(|b| h[kk * N_BINS + b] / scale).collect(),
        });
        for i in 0..obs.rows {
            scaled_weights[i * k + kk] *= scale;
        }
    }
    Ok(Svbrdf {
        basis,
        weights: scaled_weights,
        k,
        unfitted,
    })
}

/// Re-render a view of the mesh under one rig: per-pixel
/// `Σ_k w_k · H_k[bin(n,l,v)] · max(n·l, 0) · V`. Returns one image per LED
/// plus a flag map of pixels rendered with mean (unfitted) weights.
pub fn render_svbrdf(
    mesh: &TriangleMesh,
    svbrdf: &Svbrdf,
    camera: &CameraModel,
    leds: usize,
    light_of: &(dyn Fn(usize, &Point3<f64>) -> Option<(Vector3<f64>, f64)> + Sync),
) -> (Vec<Grid<f32>>, Grid<bool>) {
    let raster = raster::rasterize(mesh, camera);
    let w = camera.width;
    let h = camera.height;
    let mut flagged = Grid::from_fill(w, h, false);
    for y in 0..h {
        for x in 0..w {
            let (ids, _) = raster.vertex_blend.get(x, y);
            if ids[0] != u32::MAX {
                let any_unfitted = ids.iter().any(|&i| svbrdf.unfitted[i as usize]);
                flagged.set(x, y, any_unfitted);
            }
        }
    }
    let mut stack = Vec::with_capacity(leds);
    for led in 0..leds {
        let rows: Vec<Vec<f32>> = (0..h)
            .into_par_iter()
            .map(|y| {
                (0..w)
                    .map(|x| {
                        let d = raster.depth.get(x, y);
                        if !d.is_finite() {
                            return f32::NAN;
                        }
                        let pos = raster.position.get(x, y);
                        let p = Point3::new(pos[0], pos[1], pos[2]);
                        let nr = raster.normal.get(x, y);
                        let normal = Vector3::new(nr[0], nr[1], nr[2]);
                        let view_dir = match camera.intrinsics {
                            Intrinsics::Orthographic { .. } => {
                                let (_, _, z) = camera.axes_world();
                                -z
                            }
                            Intrinsics::Perspective { .. } => (camera.center() - p).normalize(),
                        };
                        let Some((l, v_int)) = light_of(led, &p) else {
                            return 0.0;
                        };
                        let ndl = normal.dot(&l);
                        if ndl <= 0.0 {
                            return 0.0;
                        }
                        let Ok((th, td, ph)) = rusinkiewicz_coords(&normal, &l, &view_dir) else {
                            return 0.0;
                        };
                        let (ids, bary) = raster.vertex_blend.get(x, y);
                        let mut value = 0.0;
                        for kk in 0..svbrdf.k {
                            let mut wk = 0.0;
                            for c in 0..3 {
                                wk += bary[c] as f64
                                    * svbrdf.weights[ids[c] as usize * svbrdf.k + kk];
                            }
                            value += wk * svbrdf.basis[kk].sample(th, td, ph);
                        }
                        (value * ndl * v_int) as f32
                    })
                    .collect()
            })
            .collect();
        let mut img = Grid::from_fill(w, h, f32::NAN);
        for (y, row) in rows.into_iter().enumerate() {
            for (x, v) in row.into_iter().enumerate() {
                img.set(x, y, v);
            }
        }
        stack.push(img);
    }
    (stack, flagged)
}

/// SVBRDF container: header {K, N, 90, 2, 5}, K×900 float32 basis block,
/// N×K float32 weight block.
pub fn write_svbrdf(path: &std::path::Path, svbrdf: &Svbrdf) -> std::io::Result<()> {
    use crate::io::{write_f32, write_u32, write_u64};
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_u32(&mut w, svbrdf.k as u32)?;
    write_u64(&mut w, (svbrdf.weights.len() / svbrdf.k) as u64)?;
    write_u32(&mut w, N_THETA_H as u32)?;
    write_u32(&mut w, N_THETA_D as u32)?;
    write_u32(&mut w, N_PHI as u32)?;
    for basis in &svbrdf.basis {
        for &v in &basis.values {
            write_f32(&mut w, v as f32)?;
        }
    }
    for &v in &svbrdf.weights {
        write_f32(&mut w, v as f32)?;
    }
    Ok(())
}

pub fn read_svbrdf(path: &std::path::Path) -> std::io::Result<Svbrdf> {
    use crate::io::{read_f32, read_u32, read_u64};
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let k = read_u32(&mut r)? as usize;
    let n = read_u64(&mut r)? as usize;
    let (th, td, ph) = (read_u32(&mut r)?, read_u32(&mut r)?, read_u32(&mut r)?);
    if (th as usize, td as usize, ph as usize) != (N_THETA_H, N_THETA_D, N_PHI) {
        return Err(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            "unexpected bin layout",
        ));
    }
    let mut basis = Vec::with_capacity(k);
    for _ in 0..k {
        let mut values = Vec::with_capacity(N_BINS);
        for _ in 0..N_BINS {
            values.push(read_f32(&mut r)? as f64);
        }
        basis.push(BrdfTable { values });
    }
    let mut weights = Vec::with_capacity(n * k);
    for _ in 0..n * k {
        weights.push(read_f32(&mut r)? as f64);
    }
    Ok(Svbrdf {
        basis,
        weights,
        k,
        unfitted: vec![false; n],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn retro_reflection_is_origin() {
        let n = Vector3::z();
        let (th, td, ph) = rusinkiewicz_coords(&n, &n, &n).unwrap();
        assert!(th.abs() < 1e-12);
        assert!(td.abs() < 1e-12);
        assert!(ph.abs() < 1e-12);
    }

    #[test]
    fn half_angle_bisects() {
        let n = Vector3::z();
        let v = Vector3::z();
        let l = Vector3::new(60.0f64.to_radians().sin(), 0.0, 60.0f64.to_radians().cos());
        let (th, td, _) = rusinkiewicz_coords(&n, &l, &v).unwrap();
        assert!((th - 30.0f64.to_radians()).abs() < 1e-12);
        assert!((td - 30.0f64.to_radians()).abs() < 1e-12);
    }

    #[test]
    fn reciprocity_and_isotropy_over_random_draws() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(23);
        let mut rand_dir = |up: &Vector3<f64>| loop {
            let v = Vector3::new(
                rng.random::<f64>() * 2.0 - 1.0,
                rng.random::<f64>() * 2.0 - 1.0,
                rng.random::<f64>() * 2.0 - 1.0,
            );
            if v.norm() > 1e-3 {
                let v = v.normalize();
                if v.dot(up) > 0.05 {
                    break v;
                }
            }
        };
        for _ in 0..10_000 {
            let n = rand_dir(&Vector3::z());
            let l = rand_dir(&n);
            let v = rand_dir(&n);
            let Ok((th, td, ph)) = rusinkiewicz_coords(&n, &l, &v) else {
                continue;
            };
            // Reciprocity: swap l and v.
            let (th2, td2, ph2) = rusinkiewicz_coords(&n, &v, &l).unwrap();
            assert!((th - th2).abs() < 1e-9);
            assert!((td - td2).abs() < 1e-9);
            assert!((ph - ph2).abs() < 1e-9, "{ph} vs {ph2}");
            // Isotropy: rotate l and v jointly about n.
            let rot = nalgebra::Rotation3::from_axis_angle(
                &nalgebra::Unit::new_normalize(n),
                rng.random::<f64>() * std::f64::consts::TAU,
            );
            let (th3, td3, ph3) = rusinkiewicz_coords(&n, &(rot * l), &(rot * v)).unwrap();
            assert!((th - th3).abs() < 1e-9);
            assert!((td - td3).abs() < 1e-9);
            assert!((ph - ph3).abs() < 1e-9);
        }
    }

    #[test]
    fn bin_corners_and_midpoints() {
        assert_eq!(bin_index(0.0, 0.0, 0.0).unwrap(), 0);
        let e = FRAC_PI_2 - 1e-9;
        assert_eq!(bin_index(e, e, e).unwrap(), N_BINS - 1);
        // θ_h = π/4 exactly → bin 45.
        let idx = bin_index(std::f64::consts::FRAC_PI_4, 0.0, 0.0).unwrap();
        assert_eq!(idx / (N_THETA_D * N_PHI), 45);
        assert!(bin_index(-0.1, 0.0, 0.0).is_err());
        assert!(bin_index(0.0, 2.0, 0.0).is_err());
    }

    #[test]
    fn bin_index_is_a_bijection_on_the_lattice() {
        let mut seen = vec![false; N_BINS];
        for th in 0..N_THETA_H {
            for td in 0..N_THETA_D {
                for ph in 0..N_PHI {
                    let (a, b, c) = bin_center(th * N_THETA_D * N_PHI + td * N_PHI + ph);
                    let idx = bin_index(a, b, c).unwrap();
                    assert!(!seen[idx]);
                    seen[idx] = true;
                }
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn constant_table_samples_constant() {
        let t = BrdfTable::constant(0.75);
        for (th, td, ph) in [(0.0, 0.0, 0.0), (0.3, 0.7, 1.5), (1.55, 1.55, 1.55)] {
            assert!((t.sample(th, td, ph) - 0.75).abs() < 1e-12);
        }
    }
}

//! Calibrated 3D field of per-LED lighting intensity, queried by trilinear
//! interpolation; queries outside the bounds clamp to the nearest face.

use std::io::{BufReader, BufWriter};
use std::path::Path;

use nalgebra::Point3;

use crate::io::{read_f32, read_f64, read_u64, write_f32, write_f64, write_u64};

#[derive(Debug, Clone)]
pub struct IntensityVolume {
    bounds_min: Point3<f64>,
    bounds_max: Point3<f64>,
    nx: usize,
    ny: usize,
    nz: usize,
    /// One dense grid per LED, x fastest.
    grids: Vec<Vec<f32>>,
}

impl IntensityVolume {
    pub fn new(
        bounds_min: Point3<f64>,
        bounds_max: Point3<f64>,
        resolution: (usize, usize, usize),
        led_count: usize,
    ) -> Self {
        let (nx, ny, nz) = resolution;
        assert!(nx >= 1 && ny >= 1 && nz >= 1);
        Self {
            bounds_min,
            bounds_max,
            nx,
            ny,
            nz,
            grids: vec![vec![0.0; nx * ny * nz]; led_count],
        }
    }

    /// A volume that reports the same scalar everywhere, per LED (the far-
    /// setup "mean intensity" shortcut).
    pub fn uniform(values: &[f64]) -> Self {
        let mut v = Self::new(
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(1.0, 1.0, 1.0),
            (1, 1, 1),
            values.len(),
        );
        for (led, &val) in values.iter().enumerate() {
            v.grids[led][0] = val as f32;
        }
        v
    }

    pub fn led_count(&self) -> usize {
        self.grids.len()
    }

    pub fn resolution(&self) -> (usize, usize, usize) {
        (self.nx, self.ny, self.nz)
    }

    pub fn bounds(&self) -> (Point3<f64>, Point3<f64>) {
        (self.bounds_min, self.bounds_max)
    }

    #[inline]
    fn idx(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.ny + y) * self.nx + x
    }

    /// Continuous grid coordinate of a camera-frame point along one axis,
    /// clamped into the valid interpolation range.
    fn grid_coord(&self, p: &Point3<f64>, axis: usize) -> f64 {
        let n = [self.nx, self.ny, self.nz][axis];
        if n == 1 {
            return 0.0;
        }
        let lo = self.bounds_min[axis];
        let hi = self.bounds_max[axis];
        let t = (p[axis] - lo) / (hi - lo);
        (t * (n - 1) as f64).clamp(0.0, (n - 1) as f64)
    }

    /// Camera-frame position of a grid cell center.
    pub fn cell_center(&self, x: usize, y: usize, z: usize) -> Point3<f64> {
        let f = |axis: usize, i: usize| {
            let n = [self.nx, self.ny, self.nz][axis];
            if n == 1 {
                0.5 * (self.bounds_min[axis] + self.bounds_max[axis])
            } else {
                self.bounds_min[axis]
                    + (self.bounds_max[axis] - self.bounds_min[axis]) * i as f64 / (n - 1) as f64
            }
        };
        Point3::new(f(0, x), f(1, y), f(2, z))
    }

    /// Mean grid value per LED (the far-setup collapse).
    pub fn mean_per_led(&self) -> Vec<f64> {
        self.grids
            .iter()
            .map(|g| {
                let finite: Vec<f64> = g.iter().filter(|v| v.is_finite()).map(|&v| v as f64).collect();
                if finite.is_empty() {
                    0.0
                } else {
                    finite.iter().sum::<f64>() / finite.len() as f64
                }
            })
            .collect()
    }

    /// Trilinear query of LED `led` at camera-frame point `p`.
    pub fn query(&self, led: usize, p: &Point3<f64>) -> f64 {
        let gx = self.grid_coord(p, 0);
        let gy = self.grid_coord(p, 1);
        let gz = self.grid_coord(p, 2);
        let x0 = gx.floor() as usize;
        let y0 = gy.floor() as usize;
        let z0 = gz.floor() as usize;
        let x1 = (x0 + 1).min(self.nx - 1);
        let y1 = (y0 + 1).min(self.ny - 1);
        let z1 = (z0 + 1).min(self.nz - 1);
        let fx = gx - x0 as f64;
        let fy = gy - y0 as f64;
        let fz = gz - z0 as f64;
        let g = &self.grids[led];
        let mut acc = 0.0;
        for (zi, wz) in [(z0, 1.0 - fz), (z1, fz)] {
            for (yi, wy) in [(y0, 1.0 - fy), (y1, fy)] {
                for (xi, wx) in [(x0, 1.0 - fx), (x1, fx)] {
                    acc += wz * wy * wx * g[self.idx(xi, yi, zi)] as f64;
                }
            }
        }
        acc
    }

    /// Splat weighted samples into the volume. `samples` carries
    /// `(position, value, weight)` triples for one LED; cells not reached by
    /// any sample are filled from their nearest non-empty cell afterwards.
    pub fn splat(&mut self, led: usize, samples: &[(Point3<f64>, f64, f64)]) {
        let mut acc = vec![0.0f64; self.nx * self.ny * self.nz];
        let mut wsum = vec![0.0f64; self.nx * self.ny * self.nz];
        for (p, v, w) in samples {
            let gx = self.grid_coord(p, 0);
            let gy = self.grid_coord(p, 1);
            let gz = self.grid_coord(p, 2);
            let x0 = gx.floor() as usize;
            let y0 = gy.floor() as usize;
            let z0 = gz.floor() as usize;
            let x1 = (x0 + 1).min(self.nx - 1);
            let y1 = (y0 + 1).min(self.ny - 1);
            let z1 = (z0 + 1).min(self.nz - 1);
            let fx = gx - x0 as f64;
            let fy = gy - y0 as f64;
            let fz = gz - z0 as f64;
            for (zi, wz) in [(z0, 1.0 - fz), (z1, fz)] {
                for (yi, wy) in [(y0, 1.0 - fy), (y1, fy)] {
                    for (xi, wx) in [(x0, 1.0 - fx), (x1, fx)] {
                        let wt = w * wz * wy * wx;
                        let i = self.idx(xi, yi, zi);
                        acc[i] += wt * v;
                        wsum[i] += wt;
                    }
                }
            }
        }
        for i in 0..acc.len() {
            if wsum[i] > 1e-12 {
                self.grids[led][i] = (acc[i] / wsum[i]) as f32;
            } else {
                self.grids[led][i] = f32::NAN;
            }
        }
        self.fill_empty(led);
    }

    /// Replace NaN cells by the value of the nearest non-empty cell
    /// (grid-index distance).
    fn fill_empty(&mut self, led: usize) {
        let mut filled: Vec<(usize, usize, usize, f32)> = Vec::new();
        for z in 0..self.nz {
            for y in 0..self.ny {
                for x in 0..self.nx {
                    let v = self.grids[led][self.idx(x, y, z)];
                    if !v.is_nan() {
                        filled.push((x, y, z, v));
                    }
                }
            }
        }
        if filled.is_empty() {
            for v in self.grids[led].iter_mut() {
                *v = 0.0;
            }
            return;
        }
        for z in 0..self.nz {
            for y in 0..self.ny {
                for x in 0..self.nx {
                    let i = self.idx(x, y, z);
                    if self.grids[led][i].is_nan() {
                        let mut best = f64::INFINITY;
                        let mut val = 0.0f32;
                        for &(fx, fy, fz, fv) in &filled {
                            let d = (fx as f64 - x as f64).powi(2)
                                + (fy as f64 - y as f64).powi(2)
                                + (fz as f64 - z as f64).powi(2);
                            if d < best {
                                best = d;
                                val = fv;
                            }
                        }
                        self.grids[led][i] = val;
                    }
                }
            }
        }
    }

    /// Binary format: bounds and resolution as little-endian 64-bit values,
    /// then one dense float32 grid per LED (x fastest).
    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        for k in 0..3 {
            write_f64(&mut w, self.bounds_min[k])?;
        }
        for k in 0..3 {
            write_f64(&mut w, self.bounds_max[k])?;
        }
        write_u64(&mut w, self.nx as u64)?;
        write_u64(&mut w, self.ny as u64)?;
        write_u64(&mut w, self.nz as u64)?;
        write_u64(&mut w, self.grids.len() as u64)?;
        for g in &self.grids {
            for &v in g {
                write_f32(&mut w, v)?;
            }
        }
        Ok(())
    }

    pub fn read(path: &Path) -> std::io::Result<Self> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        let mut lo = [0.0; 3];
        let mut hi = [0.0; 3];
        for v in lo.iter_mut() {
            *v = read_f64(&mut r)?;
        }
        for v in hi.iter_mut() {
            *v = read_f64(&mut r)?;
        }
        let nx = read_u64(&mut r)? as usize;
        let ny = read_u64(&mut r)? as usize;
        let nz = read_u64(&mut r)? as usize;
        let leds = read_u64(&mut r)? as usize;
        let mut grids = Vec::with_capacity(leds);
        for _ in 0..leds {
            let mut g = Vec::with_capacity(nx * ny * nz);
            for _ in 0..nx * ny * nz {
                g.push(read_f32(&mut r)?);
            }
            grids.push(g);
        }
        Ok(Self {
            bounds_min: Point3::new(lo[0], lo[1], lo[2]),
            bounds_max: Point3::new(hi[0], hi[1], hi[2]),
            nx,
            ny,
            nz,
            grids,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_volume_queries_constant() {
        let v = IntensityVolume::uniform(&[2.0, 3.0]);
        assert_eq!(v.query(0, &Point3::new(-10.0, 4.0, 99.0)), 2.0);
        assert_eq!(v.query(1, &Point3::new(0.5, 0.5, 0.5)), 3.0);
    }

    #[test]
    fn single_sample_at_cell_center_round_trips() {
        let mut v = IntensityVolume::new(
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(2.0, 2.0, 2.0),
            (3, 3, 3),
            1,
        );
        let c = v.cell_center(1, 1, 1);
        v.splat(0, &[(c, 4.5, 1.0)]);
        assert!((v.query(0, &c) - 4.5).abs() < 1e-6);
    }

    #[test]
    fn queries_clamp_outside_bounds() {
        let mut v = IntensityVolume::new(
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(1.0, 1.0, 1.0),
            (2, 2, 2),
            1,
        );
        // Linear-ish field via splats at the 8 corners.
        let mut samples = Vec::new();
        for z in 0..2 {
            for y in 0..2 {
                for x in 0..2 {
                    let p = v.cell_center(x, y, z);
                    samples.push((p, p.x + 2.0 * p.y, 1.0));
                }
            }
        }
        v.splat(0, &samples);
        let inside = v.query(0, &Point3::new(1.0, 1.0, 0.5));
        let outside = v.query(0, &Point3::new(5.0, 5.0, 0.5));
        assert!((inside - outside).abs() < 1e-6);
    }

    #[test]
    fn file_round_trip() {
        let dir = std::env::temp_dir().join("mvps_vol_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("vol.bin");
        let mut v = IntensityVolume::new(
            Point3::new(-1.0, -2.0, 3.0),
            Point3::new(1.0, 2.0, 5.0),
            (4, 3, 2),
            3,
        );
        for led in 0..3 {
            for i in 0..v.grids[led].len() {
                v.grids[led][i] = (led * 100 + i) as f32 * 0.25;
            }
        }
        v.write(&path).unwrap();
        let back = IntensityVolume::read(&path).unwrap();
        assert_eq!(back.resolution(), (4, 3, 2));
        assert_eq!(back.led_count(), 3);
        for led in 0..3 {
            assert_eq!(v.grids[led], back.grids[led]);
        }
    }
}

//! Dense 2D grids used for images, masks and per-pixel maps.
//!
//! Pixel centers sit at integer coordinates; `(0, 0)` is the top-left pixel
//! and y grows downward. Sub-pixel access uses bilinear interpolation.

/// Row-major 2D grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

impl<T: Copy> Grid<T> {
    pub fn from_fill(width: usize, height: usize, value: T) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), width * height);
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> T {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: T) {
        self.data[y * self.width + x] = value;
    }

    #[inline]
    pub fn in_bounds(&self, x: i64, y: i64) -> bool {
        x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Grid<U> {
        Grid {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Parallel-friendly row split.
    pub fn rows_mut(&mut self) -> std::slice::ChunksMut<'_, T> {
        self.data.chunks_mut(self.width)
    }
}

impl Grid<f64> {
    /// Bilinear sample at sub-pixel position. Returns NaN outside the
    /// `[0, w-1] × [0, h-1]` support or when any contributing pixel is NaN.
    pub fn bilinear(&self, x: f64, y: f64) -> f64 {
        if !(x >= 0.0 && y >= 0.0 && x <= (self.width - 1) as f64 && y <= (self.height - 1) as f64)
        {
            return f64::NAN;
        }
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let v00 = self.get(x0, y0);
        let v10 = self.get(x1, y0);
        let v01 = self.get(x0, y1);
        let v11 = self.get(x1, y1);
        (1.0 - fy) * ((1.0 - fx) * v00 + fx * v10) + fy * ((1.0 - fx) * v01 + fx * v11)
    }
}

impl Grid<f32> {
    pub fn bilinear(&self, x: f64, y: f64) -> f64 {
        if !(x >= 0.0 && y >= 0.0 && x <= (self.width - 1) as f64 && y <= (self.height - 1) as f64)
        {
            return f64::NAN;
        }
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let v00 = self.get(x0, y0) as f64;
        let v10 = self.get(x1, y0) as f64;
        let v01 = self.get(x0, y1) as f64;
        let v11 = self.get(x1, y1) as f64;
        (1.0 - fy) * ((1.0 - fx) * v00 + fx * v10) + fy * ((1.0 - fx) * v01 + fx * v11)
    }
}

impl Grid<bool> {
    /// True where the pixel is inside bounds and set.
    pub fn at(&self, x: i64, y: i64) -> bool {
        self.in_bounds(x, y) && self.get(x as usize, y as usize)
    }

    pub fn count_true(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// Azimuth maps are mod-π angle fields; interpolating them naively breaks at
/// the 0/π seam, so sampling goes through the doubled-angle embedding
/// `(cos 2θ, sin 2θ)`.
pub fn bilinear_mod_pi(map: &Grid<f64>, x: f64, y: f64) -> f64 {
    if !(x >= 0.0
        && y >= 0.0
        && x <= (map.width() - 1) as f64
        && y <= (map.height() - 1) as f64)
    {
        return f64::NAN;
    }
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(map.width() - 1);
    let y1 = (y0 + 1).min(map.height() - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let mut c = 0.0;
    let mut s = 0.0;
    for (xx, yy, w) in [
        (x0, y0, (1.0 - fx) * (1.0 - fy)),
        (x1, y0, fx * (1.0 - fy)),
        (x0, y1, (1.0 - fx) * fy),
        (x1, y1, fx * fy),
    ] {
        let th = map.get(xx, yy);
        if th.is_nan() {
            return f64::NAN;
        }
        c += w * (2.0 * th).cos();
        s += w * (2.0 * th).sin();
    }
    if c * c + s * s < 1e-24 {
        return f64::NAN;
    }
    crate::math::fold_mod_pi(0.5 * s.atan2(c))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn bilinear_interpolates_linearly() {
        let g = Grid::from_fn(4, 4, |x, y| 2.0 * x as f64 + 3.0 * y as f64);
        assert!((g.bilinear(1.5, 2.25) - (3.0 + 6.75)).abs() < 1e-12);
        assert!(g.bilinear(-0.1, 0.0).is_nan());
        assert!(g.bilinear(3.01, 0.0).is_nan());
    }

    #[test]
    fn mod_pi_interp_crosses_seam() {
        // Angles near the 0/π seam: 0.05 and π-0.05 should interpolate to ~0.
        let g = Grid::from_vec(2, 1, vec![0.05, PI - 0.05]);
        let mid = bilinear_mod_pi(&g, 0.5, 0.0);
        let d = crate::math::mod_pi_distance(mid, 0.0);
        assert!(d < 1e-9, "seam interpolation broke: {mid}");
    }
}

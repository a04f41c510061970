//! Row-major 2-D grids of reals used for anomaly maps.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Grid {
    pub fn filled(h: usize, w: usize, value: f64) -> Self {
        Self {
            h,
            w,
            data: vec![value; h * w],
        }
    }

    /// Returns `None` when `data.len() != h * w`.
    pub fn from_vec(h: usize, w: usize, data: Vec<f64>) -> Option<Self> {
        (data.len() == h * w).then_some(Self { h, w, data })
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(h * w);
        for i in 0..h {
            for j in 0..w {
                data.push(f(i, j));
            }
        }
        Self { h, w, data }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.w + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.w + j] = v;
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn into_values(self) -> Vec<f64> {
        self.data
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn clamp_unit(&self) -> Self {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32).collect()
    }

    /// Separable Gaussian blur with edge-clamped borders. The kernel is
    /// truncated at `ceil(4 sigma)` and renormalized, so constant grids are
    /// fixed points. `sigma == 0` returns a copy.
    pub fn gaussian_smooth(&self, sigma: f64) -> Self {
        if sigma <= 0.0 || self.data.is_empty() {
            return self.clone();
        }
        let radius = (4.0 * sigma).ceil() as isize;
        let mut kernel: Vec<f64> = (-radius..=radius)
            .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
            .collect();
        let total: f64 = kernel.iter().sum();
        kernel.iter_mut().for_each(|k| *k /= total);

        let clamp = |x: isize, n: usize| x.clamp(0, n as isize - 1) as usize;
        let rows = Grid::from_fn(self.h, self.w, |i, j| {
            kernel
                .iter()
                .enumerate()
                .map(|(t, k)| k * self.get(i, clamp(j as isize + t as isize - radius, self.w)))
                .sum()
        });
        Grid::from_fn(self.h, self.w, |i, j| {
            kernel
                .iter()
                .enumerate()
                .map(|(t, k)| k * rows.get(clamp(i as isize + t as isize - radius, self.h), j))
                .sum()
        })
    }

    /// Bilinear resampling to `out_h × out_w` with corner alignment: the four
    /// corner samples of the output equal the corner cells of the input.
    pub fn upsample_bilinear(&self, out_h: usize, out_w: usize) -> Self {
        let coord = |o: usize, n_out: usize, n_in: usize| -> (usize, usize, f64) {
            if n_out <= 1 || n_in <= 1 {
                return (0, 0, 0.0);
            }
            let s = o as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
            let lo = (s.floor() as usize).min(n_in - 1);
            let hi = (lo + 1).min(n_in - 1);
            (lo, hi, s - lo as f64)
        };
        let xs: Vec<_> = (0..out_w).map(|x| coord(x, out_w, self.w)).collect();
        Grid::from_fn(out_h, out_w, |y, x| {
            let (y0, y1, fy) = coord(y, out_h, self.h);
            let (x0, x1, fx) = xs[x];
            let top = self.get(y0, x0) * (1.0 - fx) + self.get(y0, x1) * fx;
            let bottom = self.get(y1, x0) * (1.0 - fx) + self.get(y1, x1) * fx;
            top * (1.0 - fy) + bottom * fy
        })
    }
}

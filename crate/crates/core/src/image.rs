//! Dense row-major float maps (images, depth, confidence, normals).

use crate::error::{invalid, Result};
use crate::math::{Rgb, Vec3};

#[derive(Clone, Debug, PartialEq)]
pub struct Map {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Map {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return invalid(format!(
                "map data length {} does not match {width}x{height}x{channels}",
                data.len()
            ));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Self {
            width,
            height,
            channels,
            data,
        }
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn same_shape(&self, other: &Map) -> bool {
        self.width == other.width && self.height == other.height
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        (y * self.width + x) * self.channels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[self.index(x, y) + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        let i = self.index(x, y) + c;
        self.data[i] = v;
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = self.index(x, y);
        &self.data[i..i + self.channels]
    }

    pub fn vec3(&self, x: usize, y: usize) -> Vec3 {
        let p = self.pixel(x, y);
        Vec3::new(p[0], p[1], p[2])
    }

    pub fn set_vec3(&mut self, x: usize, y: usize, v: &Vec3) {
        let i = self.index(x, y);
        self.data[i..i + 3].copy_from_slice(v.as_slice());
    }

    pub fn rgb(&self, x: usize, y: usize) -> Rgb {
        self.vec3(x, y)
    }

    /// Bilinear lookup at continuous pixel coordinates (pixel centers at integers).
    /// Returns `None` outside `[0, w-1] x [0, h-1]`.
    pub fn bilinear(&self, u: f64, v: f64) -> Option<Vec<f64>> {
        let mut out = vec![0.0; self.channels];
        self.bilinear_into(u, v, &mut out).then_some(out)
    }

    pub fn bilinear_into(&self, u: f64, v: f64, out: &mut [f64]) -> bool {
        if !(u >= 0.0 && v >= 0.0 && u <= (self.width - 1) as f64 && v <= (self.height - 1) as f64)
        {
            return false;
        }
        let x0 = (u.floor() as usize).min(self.width.saturating_sub(2));
        let y0 = (v.floor() as usize).min(self.height.saturating_sub(2));
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = u - x0 as f64;
        let fy = v - y0 as f64;
        for (c, o) in out.iter_mut().enumerate().take(self.channels) {
            let a = self.get(x0, y0, c) * (1.0 - fx) + self.get(x1, y0, c) * fx;
            let b = self.get(x0, y1, c) * (1.0 - fx) + self.get(x1, y1, c) * fx;
            *o = a * (1.0 - fy) + b * fy;
        }
        true
    }

    pub fn scaled(&self, s: f64) -> Map {
        Map {
            data: self.data.iter().map(|v| v * s).collect(),
            ..self.clone()
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

//! Discretized hemispherical radiance maps.
//!
//! Rows sample the polar angle from the frame normal (row 0 nearest the
//! zenith, the last row touching the horizon); columns sample azimuth over
//! `[0, 2pi)` measured from the frame tangent toward the bitangent. Texel
//! directions are cell centers.

use std::f64::consts::{FRAC_PI_2, PI};

use crate::error::{invalid, Result};
use crate::math::{spherical_to_unit, Frame, Rgb, Vec3};

#[derive(Clone, Debug, PartialEq)]
pub struct EnvMapGrid {
    height: usize,
    width: usize,
    frame: Frame,
    texels: Vec<Rgb>,
}

impl EnvMapGrid {
    pub fn black(height: usize, width: usize, frame: Frame) -> Result<Self> {
        if height == 0 || width == 0 {
            return invalid("environment map resolution must be at least 1x1");
        }
        frame.validate()?;
        Ok(Self {
            height,
            width,
            frame,
            texels: vec![Rgb::zeros(); height * width],
        })
    }

    pub fn constant(height: usize, width: usize, frame: Frame, value: Rgb) -> Result<Self> {
        let mut g = Self::black(height, width, frame)?;
        g.texels.fill(value);
        g.validate()?;
        Ok(g)
    }

    /// Builds a grid from row-major texels.
    pub fn from_texels(height: usize, width: usize, frame: Frame, texels: Vec<Rgb>) -> Result<Self> {
        if texels.len() != height * width {
            return invalid(format!(
                "expected {} texels for a {height}x{width} map, got {}",
                height * width,
                texels.len()
            ));
        }
        let mut g = Self::black(height, width, frame)?;
        g.texels = texels;
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self
            .texels
            .iter()
            .any(|t| t.iter().any(|c| !c.is_finite() || *c < 0.0))
        {
            return invalid("environment map texels must be finite and >= 0");
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn frame(&self) -> &Frame {
        &self.frame
    }

    pub fn texels(&self) -> &[Rgb] {
        &self.texels
    }

    pub fn texels_mut(&mut self) -> &mut [Rgb] {
        &mut self.texels
    }

    pub fn get(&self, row: usize, col: usize) -> Rgb {
        self.texels[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: Rgb) {
        self.texels[row * self.width + col] = value;
    }

    pub fn polar_step(&self) -> f64 {
        FRAC_PI_2 / self.height as f64
    }

    pub fn azimuth_step(&self) -> f64 {
        2.0 * PI / self.width as f64
    }

    /// Polar angle and azimuth of a texel center in the local frame.
    pub fn texel_angles(&self, row: usize, col: usize) -> (f64, f64) {
        (
            (row as f64 + 0.5) * self.polar_step(),
            (col as f64 + 0.5) * self.azimuth_step(),
        )
    }

    pub fn texel_direction(&self, row: usize, col: usize) -> Vec3 {
        let (theta, phi) = self.texel_angles(row, col);
        self.frame.to_world(&spherical_to_unit(theta, phi))
    }

    /// All texel-center directions in row-major order.
    pub fn directions(&self) -> Vec<Vec3> {
        (0..self.height)
            .flat_map(|i| (0..self.width).map(move |j| (i, j)))
            .map(|(i, j)| self.texel_direction(i, j))
            .collect()
    }

    /// Exact solid angle of a texel: `dphi * (cos theta_lo - cos theta_hi)`.
    pub fn texel_solid_angle(&self, row: usize) -> f64 {
        let dt = self.polar_step();
        let lo = row as f64 * dt;
        let hi = lo + dt;
        self.azimuth_step() * (lo.cos() - hi.cos())
    }

    /// Texel whose cell contains `dir`, or `None` below the horizon.
    pub fn texel_of(&self, dir: &Vec3) -> Option<(usize, usize)> {
        let local = self.frame.to_local(&dir.normalize());
        if local.z < 0.0 {
            return None;
        }
        let theta = local.z.clamp(-1.0, 1.0).acos();
        let mut phi = local.y.atan2(local.x);
        if phi < 0.0 {
            phi += 2.0 * PI;
        }
        let row = ((theta / self.polar_step()) as usize).min(self.height - 1);
        let col = ((phi / self.azimuth_step()) as usize).min(self.width - 1);
        Some((row, col))
    }

    /// Row-major index of the brightest texel (by channel sum).
    pub fn argmax(&self) -> (usize, usize) {
        let (idx, _) = self
            .texels
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (k, t)| {
                let s = t.sum();
                if s > best.1 {
                    (k, s)
                } else {
                    best
                }
            });
        (idx / self.width, idx % self.width)
    }

    /// Channel values flattened texel by texel (`r, g, b, r, g, b, ...`).
    pub fn flat(&self) -> Vec<f64> {
        self.texels.iter().flat_map(|t| [t.x, t.y, t.z]).collect()
    }

    pub fn scaled(&self, s: f64) -> EnvMapGrid {
        EnvMapGrid {
            texels: self.texels.iter().map(|t| t * s).collect(),
            ..self.clone()
        }
    }
}

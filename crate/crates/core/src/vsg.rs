//! Volumetric spherical-Gaussian lighting.
//!
//! Each voxel holds an opacity and one SG lobe. Radiance arriving at a ray
//! origin from the ray direction `l` is the front-to-back composite
//! `sum_n prod_{m<n} (1 - alpha_m) alpha_n G(-l; eta_n, lambda_n, xi_n)` over
//! equally spaced samples of the in-bounds ray segment.

use rayon::prelude::*;

use crate::envmap::EnvMapGrid;
use crate::error::{invalid, Result};
use crate::math::{check_unit, spherical_to_unit, unit_to_spherical, Frame, Rgb, Vec3};

/// Default number of samples along each ray.
pub const DEFAULT_RAY_SAMPLES: usize = 64;

/// Offset of env-map ray origins along the surface normal, in voxel sizes.
pub const SURFACE_OFFSET_VOXELS: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Result<Self> {
        let b = Self { min, max };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let e = self.max - self.min;
        if !e.iter().all(|c| c.is_finite() && *c > 0.0) {
            return invalid(format!(
                "bounds must have strictly positive extent (min {:?}, max {:?})",
                self.min.as_slice(),
                self.max.as_slice()
            ));
        }
        Ok(())
    }

    pub fn extent(&self) -> Vec3 {
        self.max - self.min
    }

    pub fn diagonal(&self) -> f64 {
        self.extent().norm()
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] && p[k] <= self.max[k])
    }

    /// Parametric interval of `ray` inside the box, clipped to `[0, t_max]`.
    pub fn clip(&self, ray: &Ray) -> Option<(f64, f64)> {
        let mut t0 = 0.0f64;
        let mut t1 = ray.t_max;
        for k in 0..3 {
            let o = ray.origin[k];
            let d = ray.direction[k];
            if d == 0.0 {
                if o < self.min[k] || o > self.max[k] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / d;
            let (mut a, mut b) = ((self.min[k] - o) * inv, (self.max[k] - o) * inv);
            if a > b {
                std::mem::swap(&mut a, &mut b);
            }
            t0 = t0.max(a);
            t1 = t1.min(b);
        }
        (t1 > t0).then_some((t0, t1))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub t_max: f64,
}

impl Ray {
    pub fn new(origin: Vec3, direction: Vec3, t_max: f64) -> Result<Self> {
        check_unit(&direction, "ray direction")?;
        if !(t_max > 0.0) {
            return invalid(format!("ray t_max must be > 0 (got {t_max})"));
        }
        if !origin.iter().all(|c| c.is_finite()) {
            return invalid("ray origin must be finite");
        }
        Ok(Self {
            origin,
            direction,
            t_max,
        })
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}

/// One voxel: opacity plus an SG lobe.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Voxel {
    pub alpha: f64,
    pub theta: f64,
    pub phi: f64,
    pub sharpness: f64,
    pub intensity: Rgb,
}

impl Voxel {
    pub const EMPTY: Voxel = Voxel {
        alpha: 0.0,
        theta: 0.0,
        phi: 0.0,
        sharpness: 0.0,
        intensity: Rgb::new(0.0, 0.0, 0.0),
    };

    /// Isotropic emitter (zero sharpness).
    pub fn emissive(alpha: f64, intensity: Rgb) -> Self {
        Self {
            alpha,
            intensity,
            ..Self::EMPTY
        }
    }

    pub fn axis(&self) -> Vec3 {
        spherical_to_unit(self.theta, self.phi)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.alpha.is_finite()
            && (0.0..=1.0).contains(&self.alpha)
            && self.theta.is_finite()
            && self.phi.is_finite()
            && self.sharpness.is_finite()
            && self.sharpness >= 0.0
            && self.intensity.iter().all(|c| c.is_finite() && *c >= 0.0);
        if ok {
            Ok(())
        } else {
            invalid(format!("invalid voxel {self:?}"))
        }
    }

    /// The seven stored channels in file order.
    pub fn channels(&self) -> [f64; 7] {
        [
            self.alpha,
            self.theta,
            self.phi,
            self.sharpness,
            self.intensity.x,
            self.intensity.y,
            self.intensity.z,
        ]
    }

    pub fn from_channels(c: &[f64]) -> Self {
        Self {
            alpha: c[0],
            theta: c[1],
            phi: c[2],
            sharpness: c[3],
            intensity: Rgb::new(c[4], c[5], c[6]),
        }
    }
}

pub const VOXEL_CHANNELS: [&str; 7] = ["alpha", "theta", "phi", "sharpness", "r", "g", "b"];

/// Trilinear interpolation stencil: eight voxel indices and weights.
pub type Stencil = [(usize, f64); 8];

#[derive(Clone, Debug, PartialEq)]
pub struct VsgVolume {
    dims: [usize; 3],
    bounds: Aabb,
    voxels: Vec<Voxel>,
}

impl VsgVolume {
    pub fn new(dims: [usize; 3], bounds: Aabb, voxels: Vec<Voxel>) -> Result<Self> {
        if dims.contains(&0) {
            return invalid("volume dims must be >= 1 on every axis");
        }
        bounds.validate()?;
        if voxels.len() != dims.iter().product::<usize>() {
            return invalid(format!(
                "{} voxels do not match dims {dims:?}",
                voxels.len()
            ));
        }
        for v in &voxels {
            v.validate()?;
        }
        Ok(Self {
            dims,
            bounds,
            voxels,
        })
    }

    pub fn uniform(dims: [usize; 3], bounds: Aabb, voxel: Voxel) -> Result<Self> {
        Self::new(dims, bounds, vec![voxel; dims.iter().product()])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn bounds(&self) -> &Aabb {
        &self.bounds
    }

    pub fn voxels(&self) -> &[Voxel] {
        &self.voxels
    }

    /// Linear index; x varies slowest, z fastest.
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.dims[1] + y) * self.dims[2] + z
    }

    pub fn voxel(&self, x: usize, y: usize, z: usize) -> &Voxel {
        &self.voxels[self.index(x, y, z)]
    }

    pub fn set_voxel(&mut self, x: usize, y: usize, z: usize, v: Voxel) -> Result<()> {
        v.validate()?;
        let i = self.index(x, y, z);
        self.voxels[i] = v;
        Ok(())
    }

    pub fn voxel_size(&self) -> Vec3 {
        let e = self.bounds.extent();
        Vec3::new(
            e.x / self.dims[0] as f64,
            e.y / self.dims[1] as f64,
            e.z / self.dims[2] as f64,
        )
    }

    pub fn voxel_center(&self, x: usize, y: usize, z: usize) -> Vec3 {
        let s = self.voxel_size();
        self.bounds.min
            + Vec3::new(
                (x as f64 + 0.5) * s.x,
                (y as f64 + 0.5) * s.y,
                (z as f64 + 0.5) * s.z,
            )
    }

    /// Trilinear stencil at `p`; coordinates beyond the outermost voxel
    /// centers clamp to the boundary voxels.
    pub fn stencil(&self, p: &Vec3) -> Stencil {
        let s = self.voxel_size();
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        let mut f = [0.0f64; 3];
        for k in 0..3 {
            let n = self.dims[k];
            let g = ((p[k] - self.bounds.min[k]) / s[k] - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = (g.floor() as usize).min(n.saturating_sub(2));
            lo[k] = i0;
            hi[k] = (i0 + 1).min(n - 1);
            f[k] = if hi[k] == lo[k] { 0.0 } else { g - i0 as f64 };
        }
        let mut out = [(0usize, 0.0f64); 8];
        for (c, slot) in out.iter_mut().enumerate() {
            let pick = |k: usize| if c >> (2 - k) & 1 == 1 { (hi[k], f[k]) } else { (lo[k], 1.0 - f[k]) };
            let (x, wx) = pick(0);
            let (y, wy) = pick(1);
            let (z, wz) = pick(2);
            *slot = (self.index(x, y, z), wx * wy * wz);
        }
        out
    }

    /// Interpolated channels at `p`. The axis is the normalized weighted sum
    /// of the voxel axes.
    pub fn interpolate(&self, p: &Vec3) -> RaySample {
        self.interpolate_stencil(&self.stencil(p), 0.0)
    }

    pub(crate) fn interpolate_stencil(&self, stencil: &Stencil, t: f64) -> RaySample {
        let mut alpha = 0.0;
        let mut sharpness = 0.0;
        let mut intensity = Rgb::zeros();
        let mut axis_sum = Vec3::zeros();
        let mut heaviest = (0usize, f64::NEG_INFINITY);
        for &(i, w) in stencil {
            let v = &self.voxels[i];
            alpha += w * v.alpha;
            sharpness += w * v.sharpness;
            intensity += v.intensity * w;
            axis_sum += v.axis() * w;
            if w > heaviest.1 {
                heaviest = (i, w);
            }
        }
        let norm = axis_sum.norm();
        let axis = if norm > 1e-12 {
            axis_sum / norm
        } else {
            self.voxels[heaviest.0].axis()
        };
        let (theta, phi) = unit_to_spherical(&axis);
        RaySample {
            t,
            alpha,
            axis,
            theta,
            phi,
            sharpness,
            intensity,
        }
    }

    /// Parametric sample positions along the in-bounds part of `ray`.
    pub fn sample_positions(&self, ray: &Ray, n_samples: usize) -> Vec<f64> {
        match self.bounds.clip(ray) {
            None => Vec::new(),
            Some((t0, t1)) => {
                let dt = (t1 - t0) / n_samples as f64;
                (0..n_samples)
                    .map(|n| t0 + (n as f64 + 0.5) * dt)
                    .collect()
            }
        }
    }

    pub fn sample_ray(&self, ray: &Ray, n_samples: usize) -> Result<Vec<RaySample>> {
        if n_samples == 0 {
            return invalid("n_samples must be >= 1");
        }
        Ok(self
            .sample_positions(ray, n_samples)
            .into_iter()
            .map(|t| self.interpolate_stencil(&self.stencil(&ray.at(t)), t))
            .collect())
    }

    pub fn composite_ray(&self, ray: &Ray, n_samples: usize) -> Result<Rgb> {
        let samples = self.sample_ray(ray, n_samples)?;
        Ok(composite_samples(&samples, &ray.direction))
    }

    /// Hemispherical radiance map seen from `point` (offset slightly along
    /// `frame.normal`).
    pub fn extract_env_map(
        &self,
        point: &Vec3,
        frame: &Frame,
        height: usize,
        width: usize,
        n_samples: usize,
    ) -> Result<EnvMapGrid> {
        if n_samples == 0 {
            return invalid("n_samples must be >= 1");
        }
        let mut grid = EnvMapGrid::black(height, width, *frame)?;
        let origin = self.surface_origin(point, &frame.normal);
        let t_max = self.bounds.diagonal();
        let dirs = grid.directions();
        let texels: Vec<Rgb> = dirs
            .par_iter()
            .map(|d| {
                let ray = Ray {
                    origin,
                    direction: *d,
                    t_max,
                };
                self.composite_ray(&ray, n_samples)
            })
            .collect::<Result<_>>()?;
        grid.texels_mut().copy_from_slice(&texels);
        Ok(grid)
    }

    pub fn surface_origin(&self, point: &Vec3, normal: &Vec3) -> Vec3 {
        let eps = SURFACE_OFFSET_VOXELS * self.voxel_size().min();
        point + normal * eps
    }
}

/// Interpolated volume channels at one ray sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RaySample {
    pub t: f64,
    pub alpha: f64,
    /// Unit lobe axis.
    pub axis: Vec3,
    pub theta: f64,
    pub phi: f64,
    pub sharpness: f64,
    pub intensity: Rgb,
}

impl RaySample {
    /// Radiance this sample emits toward `-ray_dir`.
    #[inline]
    pub fn emission(&self, ray_dir: &Vec3) -> Rgb {
        let chord = (-ray_dir - self.axis).norm_squared();
        self.intensity * (-0.5 * self.sharpness * chord).exp()
    }
}

/// Front-to-back weights `prod_{m<n} (1 - alpha_m) alpha_n`.
pub fn compositing_weights(alphas: &[f64]) -> Vec<f64> {
    let mut transmittance = 1.0;
    alphas
        .iter()
        .map(|a| {
            let w = transmittance * a;
            transmittance *= 1.0 - a;
            w
        })
        .collect()
}

pub fn composite_samples(samples: &[RaySample], ray_dir: &Vec3) -> Rgb {
    let mut transmittance = 1.0;
    let mut out = Rgb::zeros();
    for s in samples {
        if transmittance == 0.0 {
            break;
        }
        out += s.emission(ray_dir) * (transmittance * s.alpha);
        transmittance *= 1.0 - s.alpha;
    }
    out
}

pub fn sample_ray(volume: &VsgVolume, ray: &Ray, n_samples: usize) -> Result<Vec<RaySample>> {
    volume.sample_ray(ray, n_samples)
}

pub fn composite_ray(volume: &VsgVolume, ray: &Ray, n_samples: usize) -> Result<Rgb> {
    volume.composite_ray(ray, n_samples)
}

pub fn extract_env_map(
    volume: &VsgVolume,
    point: &Vec3,
    frame: &Frame,
    height: usize,
    width: usize,
    n_samples: usize,
) -> Result<EnvMapGrid> {
    volume.extract_env_map(point, frame, height, width, n_samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_box() -> Aabb {
        Aabb::new(Vec3::new(-1.0, -1.0, -1.0), Vec3::new(1.0, 1.0, 1.0)).unwrap()
    }

    fn gray(c: f64) -> Rgb {
        Rgb::new(c, c, c)
    }

    #[test]
    fn ray_missing_bounds_yields_nothing() {
        let vol = VsgVolume::uniform([2, 2, 2], unit_box(), Voxel::emissive(0.5, gray(1.0))).unwrap();
        let ray = Ray::new(Vec3::new(0.0, 3.0, 0.0), Vec3::x(), 10.0).unwrap();
        assert!(vol.sample_ray(&ray, 8).unwrap().is_empty());
        assert_eq!(vol.composite_ray(&ray, 8).unwrap(), Rgb::zeros());
        // Pointing away from the box.
        let ray = Ray::new(Vec3::new(2.0, 0.0, 0.0), Vec3::x(), 10.0).unwrap();
        assert!(vol.sample_ray(&ray, 8).unwrap().is_empty());
    }

    #[test]
    fn uniform_volume_samples_equal_voxel() {
        let v = Voxel {
            alpha: 0.3,
            theta: 1.1,
            phi: -0.4,
            sharpness: 2.5,
            intensity: Rgb::new(0.1, 0.2, 0.3),
        };
        let vol = VsgVolume::uniform([3, 4, 5], unit_box(), v).unwrap();
        let ray = Ray::new(Vec3::new(-2.0, 0.1, 0.2), Vec3::new(1.0, 0.2, 0.1).normalize(), 10.0).unwrap();
        let samples = vol.sample_ray(&ray, 16).unwrap();
        assert_eq!(samples.len(), 16);
        for s in samples {
            assert!((s.alpha - v.alpha).abs() < 1e-12);
            assert!((s.theta - v.theta).abs() < 1e-9 && (s.phi - v.phi).abs() < 1e-9);
            assert!((s.sharpness - v.sharpness).abs() < 1e-12);
            assert!((s.intensity - v.intensity).norm() < 1e-12);
        }
    }

    #[test]
    fn midpoint_interpolates_half_opacity() {
        let mut vol = VsgVolume::uniform([2, 2, 2], unit_box(), Voxel::EMPTY).unwrap();
        for y in 0..2 {
            for z in 0..2 {
                vol.set_voxel(1, y, z, Voxel::emissive(1.0, gray(1.0))).unwrap();
            }
        }
        let ray = Ray::new(Vec3::new(-3.0, 0.0, 0.0), Vec3::x(), 10.0).unwrap();
        let samples = vol.sample_ray(&ray, 5).unwrap();
        assert!((samples[2].alpha - 0.5).abs() < 1e-12);
        assert!((ray.at(samples[2].t).x).abs() < 1e-12);
    }

    #[test]
    fn compositing_closed_forms() {
        let mk = |alpha: f64, c: f64| RaySample {
            t: 0.0,
            alpha,
            axis: Vec3::z(),
            theta: 0.0,
            phi: 0.0,
            sharpness: 0.0,
            intensity: gray(c),
        };
        let d = Vec3::x();
        assert_eq!(composite_samples(&[mk(0.0, 3.0), mk(0.0, 1.0)], &d), Rgb::zeros());
        assert_eq!(composite_samples(&[mk(1.0, 3.0), mk(0.7, 9.0)], &d), gray(3.0));
        let v = composite_samples(&[mk(0.5, 2.0), mk(0.5, 4.0)], &d);
        assert!((v - gray(0.5 * 2.0 + 0.25 * 4.0)).norm() < 1e-12);
    }

    #[test]
    fn weights_stay_in_simplex() {
        let w = compositing_weights(&[0.2, 0.9, 0.0, 1.0, 0.4]);
        assert!(w.iter().all(|x| (0.0..=1.0).contains(x)));
        assert!(w.iter().sum::<f64>() <= 1.0 + 1e-12);
        assert_eq!(w[4], 0.0);
    }

    #[test]
    fn dark_volume_extracts_black_map() {
        let vol = VsgVolume::uniform([4, 4, 4], unit_box(), Voxel::EMPTY).unwrap();
        let env = vol
            .extract_env_map(&Vec3::zeros(), &Frame::default(), 8, 16, 16)
            .unwrap();
        assert!(env.texels().iter().all(|t| *t == Rgb::zeros()));
    }

    #[test]
    fn invalid_construction() {
        assert!(Aabb::new(Vec3::zeros(), Vec3::new(1.0, 0.0, 1.0)).is_err());
        assert!(VsgVolume::uniform([0, 1, 1], unit_box(), Voxel::EMPTY).is_err());
        assert!(VsgVolume::uniform([1, 1, 1], unit_box(), Voxel::emissive(1.5, gray(1.0))).is_err());
        assert!(Ray::new(Vec3::zeros(), Vec3::new(1.0, 1.0, 0.0), 1.0).is_err());
        assert!(Ray::new(Vec3::zeros(), Vec3::x(), 0.0).is_err());
    }
}

//! Confidence-weighted splat of target-view maps into a voxel grid.
//!
//! Each voxel center is projected into the target camera; the maps are
//! sampled bilinearly there and scaled by `rho = exp(-C (d - D)^2)`, where
//! `d` is the voxel's z-depth and `D`, `C` the sampled depth and confidence.

use rayon::prelude::*;

use crate::error::{invalid, Result};
use crate::geometry::Camera;
use crate::image::Map;
use crate::math::Vec3;
use crate::vsg::Aabb;

pub const SURFACE_CHANNELS: [&str; 10] = [
    "image_r", "image_g", "image_b", "normal_x", "normal_y", "normal_z", "albedo_r", "albedo_g", "albedo_b",
    "roughness",
];

/// Target-view maps feeding the splat.
#[derive(Clone, Copy, Debug)]
pub struct SurfaceInputs<'a> {
    pub image: &'a Map,
    pub normal: &'a Map,
    pub albedo: &'a Map,
    pub roughness: &'a Map,
    pub depth: &'a Map,
    pub confidence: &'a Map,
}

impl SurfaceInputs<'_> {
    fn validate(&self) -> Result<()> {
        let (w, h) = (self.image.width, self.image.height);
        let maps = [
            ("image", self.image, 3),
            ("normal", self.normal, 3),
            ("albedo", self.albedo, 3),
            ("roughness", self.roughness, 1),
            ("depth", self.depth, 1),
            ("confidence", self.confidence, 1),
        ];
        for (name, m, c) in maps {
            if m.width != w || m.height != h || m.channels != c {
                return invalid(format!("{name} map must be {w}x{h} with {c} channel(s)"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SurfaceVolume {
    pub dims: [usize; 3],
    pub bounds: Aabb,
    /// Ten channels per voxel in [`SURFACE_CHANNELS`] order, x-major layout.
    pub data: Vec<f64>,
    pub rho: Vec<f64>,
}

impl SurfaceVolume {
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.dims[1] + y) * self.dims[2] + z
    }

    pub fn record(&self, x: usize, y: usize, z: usize) -> &[f64] {
        let i = self.index(x, y, z) * SURFACE_CHANNELS.len();
        &self.data[i..i + SURFACE_CHANNELS.len()]
    }

    pub fn rho_at(&self, x: usize, y: usize, z: usize) -> f64 {
        self.rho[self.index(x, y, z)]
    }
}

pub(crate) fn voxel_center(dims: [usize; 3], bounds: &Aabb, x: usize, y: usize, z: usize) -> Vec3 {
    let e = bounds.extent();
    bounds.min
        + Vec3::new(
            (x as f64 + 0.5) * e.x / dims[0] as f64,
            (y as f64 + 0.5) * e.y / dims[1] as f64,
            (z as f64 + 0.5) * e.z / dims[2] as f64,
        )
}

pub fn build_surface_volume(
    inputs: &SurfaceInputs,
    camera: &Camera,
    dims: [usize; 3],
    bounds: Aabb,
) -> Result<SurfaceVolume> {
    inputs.validate()?;
    camera.validate()?;
    bounds.validate()?;
    if dims.contains(&0) {
        return invalid("volume dims must be >= 1 on every axis");
    }
    let nc = SURFACE_CHANNELS.len();
    let per_voxel: Vec<([f64; 10], f64)> = (0..dims.iter().product::<usize>())
        .into_par_iter()
        .map(|i| {
            let (x, y, z) = (i / (dims[1] * dims[2]), (i / dims[2]) % dims[1], i % dims[2]);
            let p = camera.to_camera(&voxel_center(dims, &bounds, x, y, z));
            let Some((u, v)) = camera.project_camera(&p) else {
                return ([0.0; 10], 0.0);
            };
            let mut s = [0.0; 3];
            if !inputs.depth.bilinear_into(u, v, &mut s[..1]) {
                return ([0.0; 10], 0.0);
            }
            let d_map = s[0];
            inputs.confidence.bilinear_into(u, v, &mut s[..1]);
            let rho = (-s[0] * (p.z - d_map).powi(2)).exp();
            let mut t = [0.0; 10];
            inputs.image.bilinear_into(u, v, &mut t[0..3]);
            inputs.normal.bilinear_into(u, v, &mut t[3..6]);
            inputs.albedo.bilinear_into(u, v, &mut t[6..9]);
            inputs.roughness.bilinear_into(u, v, &mut t[9..10]);
            t.iter_mut().for_each(|c| *c *= rho);
            (t, rho)
        })
        .collect();
    let mut data = Vec::with_capacity(per_voxel.len() * nc);
    let mut rho = Vec::with_capacity(per_voxel.len());
    for (t, r) in per_voxel {
        data.extend_from_slice(&t);
        rho.push(r);
    }
    Ok(SurfaceVolume {
        dims,
        bounds,
        data,
        rho,
    })
}

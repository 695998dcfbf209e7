//! Sphere insertion lit by a VSG volume, with occlusion-ratio shadows.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::brdf::{render_diffuse, render_specular, MaterialSample};
use crate::error::{invalid, Result};
use crate::geometry::{depth_to_normal, Camera};
use crate::image::Map;
use crate::math::{reflect, Frame, Rgb, Vec3};
use crate::vsg::{Ray, VsgVolume, DEFAULT_RAY_SAMPLES};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SphereMaterial {
    Mirror,
    /// Lambertian albedo plus an optional GGX specular layer.
    Diffuse { albedo: Rgb, roughness: Option<f64> },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InsertedSphere {
    pub center: Vec3,
    pub radius: f64,
    pub material: SphereMaterial,
}

impl InsertedSphere {
    pub fn new(center: Vec3, radius: f64, material: SphereMaterial) -> Result<Self> {
        let s = Self {
            center,
            radius,
            material,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0 && self.radius.is_finite()) || !self.center.iter().all(|c| c.is_finite()) {
            return invalid(format!("sphere needs a finite center and radius > 0 (got {})", self.radius));
        }
        if let SphereMaterial::Diffuse { albedo, roughness } = self.material {
            MaterialSample::new(albedo, roughness.unwrap_or(1.0), Vec3::z())?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub point: Vec3,
    /// Outward unit normal.
    pub normal: Vec3,
}

/// Nearest intersection in `(0, t_max]`; grazing rays within a relative
/// `1e-12` of tangency count as a single hit. Non-positive radii never hit.
pub fn ray_sphere(ray: &Ray, sphere: &InsertedSphere) -> Option<Hit> {
    let r = sphere.radius;
    if !(r > 0.0) {
        return None;
    }
    let oc = ray.origin - sphere.center;
    let b = oc.dot(&ray.direction);
    let c = oc.norm_squared() - r * r;
    let mut disc = b * b - c;
    if disc < 0.0 {
        if disc < -1e-12 * r * r {
            return None;
        }
        disc = 0.0;
    }
    let sq = disc.sqrt();
    let t_min = 1e-9 * r.max(1.0);
    let t = [-b - sq, -b + sq].into_iter().find(|t| *t > t_min && *t <= ray.t_max)?;
    let point = ray.at(t);
    Some(Hit {
        t,
        point,
        normal: (point - sphere.center) / r,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InsertOptions {
    /// Polar rows of the lighting and shadow direction grids.
    pub env_height: usize,
    /// Azimuth columns of the lighting and shadow direction grids.
    pub env_width: usize,
    pub n_samples: usize,
}

impl Default for InsertOptions {
    fn default() -> Self {
        Self {
            env_height: 16,
            env_width: 32,
            n_samples: DEFAULT_RAY_SAMPLES,
        }
    }
}

/// Radiance leaving `hit` toward the viewer; `view_dir` is the incoming
/// camera-ray direction.
pub fn shade_sphere_pixel(
    hit: &Hit,
    material: &SphereMaterial,
    volume: &VsgVolume,
    view_dir: &Vec3,
    opts: &InsertOptions,
) -> Result<Rgb> {
    match material {
        SphereMaterial::Mirror => {
            let dir = reflect(view_dir, &hit.normal).normalize();
            let origin = volume.surface_origin(&hit.point, &hit.normal);
            let ray = Ray::new(origin, dir, volume.bounds().diagonal())?;
            volume.composite_ray(&ray, opts.n_samples)
        }
        SphereMaterial::Diffuse { albedo, roughness } => {
            let frame = Frame::from_normal(&hit.normal)?;
            let env = volume.extract_env_map(&hit.point, &frame, opts.env_height, opts.env_width, opts.n_samples)?;
            let mut out = render_diffuse(albedo, &env);
            if let Some(r) = roughness {
                let m = MaterialSample::new(*albedo, *r, hit.normal)?;
                out += render_specular(&m, &env, &-view_dir);
            }
            Ok(out)
        }
    }
}

/// Ratio of cosine-weighted irradiance at `point` with the sphere blocking
/// light to the irradiance without it, over the env-map direction grid.
/// Returns 1 when no light arrives through the directions the sphere blocks.
pub fn shadow_ratio(
    point: &Vec3,
    frame: &Frame,
    volume: &VsgVolume,
    sphere: &InsertedSphere,
    opts: &InsertOptions,
) -> Result<f64> {
    let grid = crate::envmap::EnvMapGrid::black(opts.env_height, opts.env_width, *frame)?;
    let origin = volume.surface_origin(point, &frame.normal);
    let t_max = volume.bounds().diagonal();
    let rays: Vec<Ray> = grid
        .directions()
        .into_iter()
        .map(|d| Ray {
            origin,
            direction: d,
            t_max,
        })
        .collect();
    let blocked: Vec<bool> = rays
        .iter()
        .map(|ray| {
            ray_sphere(
                &Ray {
                    t_max: f64::INFINITY,
                    ..*ray
                },
                sphere,
            )
            .is_some()
        })
        .collect();
    let weight = |k: usize| {
        let (theta, _) = grid.texel_angles(k / grid.width(), 0);
        theta.cos() * grid.texel_solid_angle(k / grid.width())
    };
    // Light arriving through the blocked directions; none means no shadow,
    // and the unblocked directions never need compositing.
    let mut shadowed = 0.0;
    for (k, ray) in rays.iter().enumerate().filter(|(k, _)| blocked[*k]) {
        shadowed += volume.composite_ray(ray, opts.n_samples)?.sum() * weight(k);
    }
    if shadowed <= 0.0 {
        return Ok(1.0);
    }
    let mut lit = 0.0;
    for (k, ray) in rays.iter().enumerate().filter(|(k, _)| !blocked[*k]) {
        lit += volume.composite_ray(ray, opts.n_samples)?.sum() * weight(k);
    }
    let total = lit + shadowed;
    if total <= 0.0 {
        return Ok(1.0);
    }
    Ok((lit / total).clamp(0.0, 1.0))
}

/// Target-view inputs for insertion; `depth` is z-depth.
#[derive(Clone, Copy, Debug)]
pub struct InsertView<'a> {
    pub image: &'a Map,
    pub depth: &'a Map,
    pub camera: &'a Camera,
}

#[derive(Clone, Debug)]
pub struct Insertion {
    pub image: Map,
    /// Per-pixel shadow ratio (1 on sphere pixels).
    pub shadow: Map,
    /// Pixels covered by the sphere.
    pub coverage: Vec<bool>,
}

pub fn insert_object(
    view: &InsertView,
    volume: &VsgVolume,
    sphere: &InsertedSphere,
    opts: &InsertOptions,
) -> Result<Insertion> {
    let (w, h) = (view.image.width, view.image.height);
    if view.image.channels != 3 || view.depth.channels != 1 || !view.depth.same_shape(view.image) {
        return invalid("insertion needs an RGB image and a same-sized single-channel depth map");
    }
    sphere.validate()?;
    let (normals, _) = depth_to_normal(view.depth, view.camera)?;
    let cam = view.camera;

    let pixels: Vec<(Rgb, f64, bool)> = (0..w * h)
        .into_par_iter()
        .map(|p| -> Result<(Rgb, f64, bool)> {
            let (i, j) = (p % w, p / w);
            let input = view.image.rgb(i, j);
            let ray_cam = cam.ray(i as f64, j as f64);
            let dir = (cam.rotation * ray_cam).normalize();
            let scene_t = view.depth.get(i, j, 0) * ray_cam.norm();
            let cam_ray = Ray::new(cam.center(), dir, scene_t)?;
            if let Some(hit) = ray_sphere(&cam_ray, sphere) {
                let c = shade_sphere_pixel(&hit, &sphere.material, volume, &dir, opts)?;
                return Ok((c, 1.0, true));
            }
            let point = cam_ray.at(scene_t);
            let normal = cam.rotation * normals.vec3(i, j);
            let ratio = shadow_ratio(&point, &Frame::from_normal(&normal)?, volume, sphere, opts)?;
            let out = if ratio == 1.0 { input } else { input * ratio };
            Ok((out, ratio, false))
        })
        .collect::<Result<_>>()?;

    let mut image = Map::new(w, h, 3);
    let mut shadow = Map::new(w, h, 1);
    let mut coverage = vec![false; w * h];
    for (p, (c, r, hit)) in pixels.into_iter().enumerate() {
        let (i, j) = (p % w, p / w);
        image.set_vec3(i, j, &c.map(|v| v.max(0.0)));
        shadow.set(i, j, 0, r);
        coverage[p] = hit;
    }
    Ok(Insertion {
        image,
        shadow,
        coverage,
    })
}

//! Analytic synthetic scenes: planes lit by one box emitter, seen by a grid of
//! forward-facing cameras.
//!
//! Everything is direct lighting only. Surfaces are Lambertian, so the
//! rendered image is the diffuse re-render of each pixel's ground-truth
//! environment map. Environment maps live in a world-space frame built from
//! the surface normal with [`Frame::from_normal`].

use nalgebra::Matrix3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::brdf::render_diffuse;
use crate::envmap::EnvMapGrid;
use crate::error::{invalid, Result};
use crate::geometry::{Camera, View, ViewBundle};
use crate::image::Map;
use crate::io::EnvField;
use crate::math::{Frame, Rgb, Vec3};

/// Grid offsets `(column, row)` in view order: the centre first, then the
/// edge neighbours, then the corners.
pub const GRID_ORDER: [(i32, i32); 9] = [
    (0, 0),
    (-1, 0),
    (1, 0),
    (0, -1),
    (0, 1),
    (-1, -1),
    (1, -1),
    (-1, 1),
    (1, 1),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlaneSpec {
    pub point: [f64; 3],
    pub normal: [f64; 3],
    pub albedo: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LightSpec {
    pub center: [f64; 3],
    pub half_extent: [f64; 3],
    /// Radiance leaving every face of the box.
    pub radiance: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RigSpec {
    pub eye: [f64; 3],
    pub look_at: [f64; 3],
    pub up: [f64; 3],
    pub focal: f64,
    pub views: usize,
    /// Grid spacing as a fraction of the reference view's mean depth.
    pub baseline_ratio: f64,
}

impl Default for RigSpec {
    fn default() -> Self {
        Self {
            eye: [0.0, -2.5, 2.0],
            look_at: [0.0, 0.5, 0.0],
            up: [0.0, 0.0, 1.0],
            focal: 70.0,
            views: 9,
            baseline_ratio: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub env_height: usize,
    pub env_width: usize,
    pub ground: PlaneSpec,
    pub wall: Option<PlaneSpec>,
    pub light: LightSpec,
    pub rig: RigSpec,
    /// Each visible emitter face is split into this many patches per side.
    pub light_subdivisions: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            width: 80,
            height: 60,
            env_height: 8,
            env_width: 16,
            ground: PlaneSpec {
                point: [0.0, 0.0, 0.0],
                normal: [0.0, 0.0, 1.0],
                albedo: [0.7, 0.55, 0.4],
            },
            wall: None,
            light: LightSpec {
                center: [0.4, 1.2, 1.5],
                half_extent: [0.4, 0.4, 0.05],
                radiance: [6.0, 6.0, 5.0],
            },
            rig: RigSpec::default(),
            light_subdivisions: 8,
        }
    }
}

/// Per-view ground truth alongside the rendered view.
#[derive(Clone, Debug)]
pub struct ViewTruth {
    pub albedo: Map,
    pub roughness: Map,
    /// Camera-frame unit normals facing the camera.
    pub normal: Map,
    pub env: EnvField,
}

impl ViewTruth {
    /// Ground-truth environment map of pixel `(x, y)` in its world frame.
    pub fn env_map(&self, camera: &Camera, x: usize, y: usize) -> Result<EnvMapGrid> {
        let frame = Frame::from_normal(&(camera.rotation * self.normal.vec3(x, y)))?;
        EnvMapGrid::from_texels(
            self.env.env_height,
            self.env.env_width,
            frame,
            self.env.texels(x, y),
        )
    }
}

#[derive(Clone, Debug)]
pub struct Scene {
    pub spec: SceneSpec,
    pub bundle: ViewBundle,
    pub truth: Vec<ViewTruth>,
}

struct Plane {
    point: Vec3,
    normal: Vec3,
    albedo: Rgb,
}

impl Plane {
    fn from_spec(spec: &PlaneSpec, what: &str) -> Result<Self> {
        let normal = Vec3::from(spec.normal);
        let albedo = Rgb::from(spec.albedo);
        let finite = spec.point.iter().chain(&spec.normal).chain(&spec.albedo).all(|c| c.is_finite());
        if !finite || normal.norm() == 0.0 {
            return invalid(format!("{what} needs a finite point and a non-zero normal"));
        }
        if albedo.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return invalid(format!("{what} albedo must lie in [0, 1]"));
        }
        Ok(Self {
            point: Vec3::from(spec.point),
            normal: normal.normalize(),
            albedo,
        })
    }

    /// Ray parameter of the hit, if it lies strictly ahead.
    fn hit(&self, origin: &Vec3, dir: &Vec3) -> Option<f64> {
        let denom = self.normal.dot(dir);
        if denom == 0.0 {
            return None;
        }
        let t = self.normal.dot(&(self.point - origin)) / denom;
        (t > 1e-9).then_some(t)
    }
}

struct Patch {
    center: Vec3,
    normal: Vec3,
    area: f64,
}

struct Light {
    radiance: Rgb,
    patches: Vec<Patch>,
}

impl Light {
    fn from_spec(spec: &LightSpec, subdivisions: usize) -> Result<Self> {
        let center = Vec3::from(spec.center);
        let half = Vec3::from(spec.half_extent);
        let radiance = Rgb::from(spec.radiance);
        if !center.iter().chain(half.iter()).chain(radiance.iter()).all(|c| c.is_finite()) {
            return invalid("light parameters must be finite");
        }
        if half.iter().any(|c| *c <= 0.0) {
            return invalid("light extent must be positive on every axis");
        }
        if radiance.iter().any(|c| *c < 0.0) {
            return invalid("light radiance must be non-negative");
        }
        if subdivisions == 0 {
            return invalid("light_subdivisions must be at least 1");
        }
        let n = subdivisions;
        let mut patches = Vec::with_capacity(6 * n * n);
        for axis in 0..3 {
            let (a, b) = ((axis + 1) % 3, (axis + 2) % 3);
            let area = 4.0 * half[a] * half[b] / (n * n) as f64;
            for sign in [-1.0, 1.0] {
                let mut normal = Vec3::zeros();
                normal[axis] = sign;
                for i in 0..n {
                    for j in 0..n {
                        let mut p = center + normal * half[axis];
                        p[a] += half[a] * (2.0 * (i as f64 + 0.5) / n as f64 - 1.0);
                        p[b] += half[b] * (2.0 * (j as f64 + 0.5) / n as f64 - 1.0);
                        patches.push(Patch { center: p, normal, area });
                    }
                }
            }
        }
        Ok(Self { radiance, patches })
    }
}

/// Pose with columns `[right, down, forward]` (camera x right, y down, z forward).
fn look_at_rotation(eye: &Vec3, target: &Vec3, up: &Vec3) -> Result<Matrix3<f64>> {
    let forward = (target - eye).normalize();
    let right = forward.cross(up);
    if !forward.iter().all(|c| c.is_finite()) || right.norm() < 1e-9 {
        return invalid("camera look_at must differ from eye and not be parallel to up");
    }
    let right = right.normalize();
    let down = forward.cross(&right);
    Ok(Matrix3::from_columns(&[right, down, forward]))
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width < 2 || self.height < 2 {
            return invalid("image size must be at least 2x2");
        }
        if self.env_height == 0 || self.env_width == 0 {
            return invalid("environment map size must be at least 1x1");
        }
        if !(1..=9).contains(&self.rig.views) {
            return invalid("rig.views must be between 1 and 9");
        }
        if !(self.rig.focal.is_finite() && self.rig.focal > 0.0) {
            return invalid("rig.focal must be positive");
        }
        if !(self.rig.baseline_ratio.is_finite() && self.rig.baseline_ratio >= 0.0) {
            return invalid("rig.baseline_ratio must be non-negative");
        }
        Ok(())
    }

    /// Cameras of the grid; the first is the reference (target) view.
    pub fn cameras(&self) -> Result<Vec<Camera>> {
        self.validate()?;
        let eye = Vec3::from(self.rig.eye);
        let rotation = look_at_rotation(&eye, &Vec3::from(self.rig.look_at), &Vec3::from(self.rig.up))?;
        let (cx, cy) = ((self.width as f64 - 1.0) / 2.0, (self.height as f64 - 1.0) / 2.0);
        let f = self.rig.focal;
        let reference = Camera::new(f, f, cx, cy, rotation, eye)?;
        let planes = self.planes()?;
        let mut depth_sum = 0.0;
        for y in 0..self.height {
            for x in 0..self.width {
                let (t, _) = first_hit(&planes, &reference, x, y)?;
                depth_sum += t;
            }
        }
        let spacing = self.rig.baseline_ratio * depth_sum / (self.width * self.height) as f64;
        let right = rotation.column(0).into_owned();
        let down = rotation.column(1).into_owned();
        GRID_ORDER[..self.rig.views]
            .iter()
            .map(|&(i, j)| {
                let offset = right * (i as f64 * spacing) + down * (j as f64 * spacing);
                Camera::new(f, f, cx, cy, rotation, eye + offset)
            })
            .collect()
    }

    fn planes(&self) -> Result<Vec<Plane>> {
        let mut planes = vec![Plane::from_spec(&self.ground, "ground plane")?];
        if let Some(wall) = &self.wall {
            planes.push(Plane::from_spec(wall, "wall")?);
        }
        Ok(planes)
    }
}

/// Nearest plane hit through pixel `(x, y)`: z-depth and plane index.
fn first_hit(planes: &[Plane], camera: &Camera, x: usize, y: usize) -> Result<(f64, usize)> {
    let dir = camera.rotation * camera.ray(x as f64, y as f64);
    planes
        .iter()
        .enumerate()
        .filter_map(|(k, p)| p.hit(&camera.center(), &dir).map(|t| (t, k)))
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .ok_or_else(|| crate::Error::InvalidArgument(format!("pixel ({x}, {y}) sees no surface")))
}

/// Environment map at `point` on a surface with world normal `normal`.
///
/// Each emitter patch facing the point adds its solid angle `A cos / r^2` to
/// the texel holding its direction, so the map integrates to the light's
/// true irradiance up to patch discretization.
fn surface_env(
    point: &Vec3,
    normal: &Vec3,
    planes: &[Plane],
    light: &Light,
    env_height: usize,
    env_width: usize,
) -> Result<EnvMapGrid> {
    let mut env = EnvMapGrid::black(env_height, env_width, Frame::from_normal(normal)?)?;
    for patch in &light.patches {
        let to_patch = patch.center - point;
        let dist = to_patch.norm();
        let dir = to_patch / dist;
        let facing = -patch.normal.dot(&dir);
        if facing <= 0.0 || normal.dot(&dir) <= 0.0 {
            continue;
        }
        let blocked = planes
            .iter()
            .any(|p| p.hit(point, &dir).is_some_and(|t| t < dist - 1e-9));
        if blocked {
            continue;
        }
        if let Some((row, col)) = env.texel_of(&dir) {
            let dw = patch.area * facing / (dist * dist);
            let add = light.radiance * (dw / env.texel_solid_angle(row));
            let cur = env.get(row, col);
            env.set(row, col, cur + add);
        }
    }
    Ok(env)
}

pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let planes = spec.planes()?;
    let light = Light::from_spec(&spec.light, spec.light_subdivisions)?;
    let cameras = spec.cameras()?;
    let (w, h) = (spec.width, spec.height);

    let mut views = Vec::with_capacity(cameras.len());
    let mut truth = Vec::with_capacity(cameras.len());
    for camera in cameras {
        let pixels: Vec<(usize, usize)> = (0..h).flat_map(|y| (0..w).map(move |x| (x, y))).collect();
        let rendered = pixels
            .par_iter()
            .map(|&(x, y)| {
                let (depth, k) = first_hit(&planes, &camera, x, y)?;
                let plane = &planes[k];
                let point = camera.backproject(x as f64, y as f64, depth);
                // Orient the normal toward the camera.
                let normal = if plane.normal.dot(&(camera.center() - point)) >= 0.0 {
                    plane.normal
                } else {
                    -plane.normal
                };
                let env = surface_env(&point, &normal, &planes, &light, spec.env_height, spec.env_width)?;
                let color = render_diffuse(&plane.albedo, &env);
                Ok((depth, plane.albedo, camera.rotation.transpose() * normal, env, color))
            })
            .collect::<Result<Vec<_>>>()?;

        let mut image = Map::new(w, h, 3);
        let mut depth = Map::new(w, h, 1);
        let mut albedo = Map::new(w, h, 3);
        let mut normal = Map::new(w, h, 3);
        let mut env = EnvField::new(w, h, spec.env_height, spec.env_width);
        for (&(x, y), (d, a, n, e, c)) in pixels.iter().zip(rendered) {
            image.set_vec3(x, y, &c);
            depth.set(x, y, 0, d);
            albedo.set_vec3(x, y, &a);
            normal.set_vec3(x, y, &n);
            env.set_texels(x, y, e.texels());
        }
        views.push(View {
            image,
            depth,
            confidence: Map::filled(w, h, 1, 1.0),
            camera,
        });
        truth.push(ViewTruth {
            albedo,
            roughness: Map::filled(w, h, 1, 1.0),
            normal,
            env,
        });
    }
    Ok(Scene {
        spec: spec.clone(),
        bundle: ViewBundle::new(views, 0)?,
        truth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SceneSpec {
        SceneSpec {
            width: 16,
            height: 12,
            rig: RigSpec {
                focal: 14.0,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn default_scene_is_valid() {
        let scene = generate_scene(&small()).unwrap();
        assert_eq!(scene.bundle.views.len(), 9);
        assert_eq!(scene.bundle.target_index, 0);
        let img = &scene.bundle.target().image;
        assert!(img.all_finite());
        assert!(img.data.iter().any(|v| *v > 0.0));
    }

    #[test]
    fn grid_is_planar_and_evenly_spaced() {
        let cams = small().cameras().unwrap();
        let c0 = cams[0].center();
        let r = cams[0].rotation.column(0).into_owned();
        let d = cams[0].rotation.column(1).into_owned();
        let f = cams[0].rotation.column(2).into_owned();
        let step = (cams[2].center() - c0).norm();
        assert!(step > 0.0);
        for (cam, &(i, j)) in cams.iter().zip(&GRID_ORDER) {
            let off = cam.center() - c0;
            assert!(off.dot(&f).abs() < 1e-12);
            assert!((off.dot(&r) - i as f64 * step).abs() < 1e-12);
            assert!((off.dot(&d) - j as f64 * step).abs() < 1e-12);
        }
    }

    #[test]
    fn dark_light_gives_black_scene() {
        let mut spec = small();
        spec.light.radiance = [0.0; 3];
        let scene = generate_scene(&spec).unwrap();
        for (v, t) in scene.bundle.views.iter().zip(&scene.truth) {
            assert!(v.image.data.iter().all(|c| *c == 0.0));
            assert!(t.env.map.data.iter().all(|c| *c == 0.0));
        }
    }

    #[test]
    fn rejects_bad_specs() {
        let mut spec = small();
        spec.rig.views = 10;
        assert!(generate_scene(&spec).is_err());
        let mut spec = small();
        spec.light.radiance = [-1.0, 0.0, 0.0];
        assert!(generate_scene(&spec).is_err());
        let mut spec = small();
        spec.rig.look_at = [0.0, -2.5, 5.0];
        assert!(generate_scene(&spec).is_err());
    }
}

//! Pinhole cameras, reprojection, depth-derived normals and multi-view
//! attention weights.
//!
//! Camera frame: +x right, +y down, +z forward. Depth maps hold z-depth
//! (distance along the optical axis), and pixel `(i, j)` has its center at
//! `(u, v) = (i, j)`.

use nalgebra::Matrix3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::image::Map;
use crate::math::Vec3;

/// Error assigned when the reprojected depth matches exactly.
pub const PROJECTION_ERROR_CAP: f64 = 30.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CameraJson", into = "CameraJson")]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// World-from-camera rotation.
    pub rotation: Matrix3<f64>,
    /// Camera center in world coordinates.
    pub translation: Vec3,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct PoseJson {
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CameraJson {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    world_from_camera: PoseJson,
}

impl TryFrom<CameraJson> for Camera {
    type Error = crate::Error;

    fn try_from(j: CameraJson) -> Result<Self> {
        let r = j.world_from_camera.rotation;
        let rotation = Matrix3::from_fn(|i, k| r[i][k]);
        Camera::new(j.fx, j.fy, j.cx, j.cy, rotation, Vec3::from(j.world_from_camera.translation))
    }
}

impl From<Camera> for CameraJson {
    fn from(c: Camera) -> Self {
        let r = c.rotation;
        CameraJson {
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            world_from_camera: PoseJson {
                rotation: std::array::from_fn(|i| std::array::from_fn(|k| r[(i, k)])),
                translation: [c.translation.x, c.translation.y, c.translation.z],
            },
        }
    }
}

impl Camera {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, rotation: Matrix3<f64>, translation: Vec3) -> Result<Self> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            rotation,
            translation,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `translation` looking along world +z with identity rotation.
    pub fn identity(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        Self::new(fx, fy, cx, cy, Matrix3::identity(), Vec3::zeros())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return invalid(format!("focal lengths must be positive (fx={}, fy={})", self.fx, self.fy));
        }
        if !(self.cx.is_finite() && self.cy.is_finite()) || self.translation.iter().any(|v| !v.is_finite()) {
            return invalid("camera parameters must be finite");
        }
        let r = &self.rotation;
        let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
        if !(ortho <= 1e-6) || (r.determinant() - 1.0).abs() > 1e-6 {
            return invalid("camera rotation must be orthonormal with determinant +1");
        }
        Ok(())
    }

    /// Camera-frame direction through pixel `(u, v)` with unit z component.
    pub fn ray(&self, u: f64, v: f64) -> Vec3 {
        Vec3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    /// Camera-frame point at z-depth `depth` through pixel `(u, v)`.
    pub fn backproject_camera(&self, u: f64, v: f64, depth: f64) -> Vec3 {
        self.ray(u, v) * depth
    }

    pub fn backproject(&self, u: f64, v: f64, depth: f64) -> Vec3 {
        self.to_world(&self.backproject_camera(u, v, depth))
    }

    pub fn to_world(&self, p_cam: &Vec3) -> Vec3 {
        self.rotation * p_cam + self.translation
    }

    pub fn to_camera(&self, p_world: &Vec3) -> Vec3 {
        self.rotation.transpose() * (p_world - self.translation)
    }

    pub fn center(&self) -> Vec3 {
        self.translation
    }

    /// Pixel coordinates of a camera-frame point, or `None` when it is not in
    /// front of the camera.
    pub fn project_camera(&self, p: &Vec3) -> Option<(f64, f64)> {
        (p.z > 0.0).then(|| (self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }
}

#[derive(Clone, Debug)]
pub struct View {
    pub image: Map,
    pub depth: Map,
    pub confidence: Map,
    pub camera: Camera,
}

#[derive(Clone, Debug)]
pub struct ViewBundle {
    pub views: Vec<View>,
    pub target_index: usize,
}

impl ViewBundle {
    pub fn new(views: Vec<View>, target_index: usize) -> Result<Self> {
        let b = Self { views, target_index };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.views.first() else {
            return invalid("a view bundle needs at least one view");
        };
        if self.target_index >= self.views.len() {
            return invalid(format!(
                "target index {} out of range for {} views",
                self.target_index,
                self.views.len()
            ));
        }
        let (w, h) = (first.image.width, first.image.height);
        for (k, v) in self.views.iter().enumerate() {
            let shaped = |m: &Map, c: usize| m.width == w && m.height == h && m.channels == c;
            if !shaped(&v.image, 3) || !shaped(&v.depth, 1) || !shaped(&v.confidence, 1) {
                return invalid(format!("view {k}: maps must share a {w}x{h} size (RGB image, 1-channel depth and confidence)"));
            }
            if v.image.data.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
                return invalid(format!("view {k}: image values must be finite and non-negative"));
            }
            if v.depth.data.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
                return invalid(format!("view {k}: depth must be positive"));
            }
            if v.confidence.data.iter().any(|x| !(0.0..=1.0).contains(x)) {
                return invalid(format!("view {k}: confidence must lie in [0, 1]"));
            }
            v.camera.validate()?;
        }
        Ok(())
    }

    pub fn target(&self) -> &View {
        &self.views[self.target_index]
    }

    pub fn width(&self) -> usize {
        self.views[0].image.width
    }

    pub fn height(&self) -> usize {
        self.views[0].image.height
    }
}

#[derive(Clone, Debug)]
pub struct GeometryMaps {
    /// Camera-frame unit normals (3 channels).
    pub normal: Map,
    pub depth_gradient: Map,
    /// Pixels whose normal fell back to the default because the depth was degenerate.
    pub degenerate: Vec<bool>,
}

pub fn compute_geometry(depth: &Map, camera: &Camera) -> Result<GeometryMaps> {
    let (normal, degenerate) = depth_to_normal(depth, camera)?;
    Ok(GeometryMaps {
        normal,
        depth_gradient: depth_gradient(depth)?,
        degenerate,
    })
}

fn check_depth(depth: &Map) -> Result<()> {
    if depth.channels != 1 || depth.pixels() == 0 {
        return invalid("depth must be a non-empty single-channel map");
    }
    if let Some(d) = depth.data.iter().find(|d| !(d.is_finite() && **d > 0.0)) {
        return invalid(format!("depth values must be positive and finite (got {d})"));
    }
    Ok(())
}

/// Central difference along one axis, one-sided at the borders; `None` when
/// the axis has a single sample.
fn diff<T>(n: usize, i: usize, at: impl Fn(usize) -> T) -> Option<T>
where
    T: std::ops::Sub<Output = T> + std::ops::Div<f64, Output = T>,
{
    if n < 2 {
        None
    } else if i == 0 {
        Some(at(1) - at(0))
    } else if i == n - 1 {
        Some(at(n - 1) - at(n - 2))
    } else {
        Some((at(i + 1) - at(i - 1)) / 2.0)
    }
}

/// Normals from the cross product of backprojected position derivatives,
/// oriented toward the camera. Returns the normal map and the degenerate mask.
pub fn depth_to_normal(depth: &Map, camera: &Camera) -> Result<(Map, Vec<bool>)> {
    check_depth(depth)?;
    let (w, h) = (depth.width, depth.height);
    let pos = |i: usize, j: usize| camera.backproject_camera(i as f64, j as f64, depth.get(i, j, 0));
    let fallback = Vec3::new(0.0, 0.0, -1.0);

    let rows: Vec<(Vec<f64>, Vec<bool>)> = (0..h)
        .into_par_iter()
        .map(|j| {
            let mut normals = Vec::with_capacity(w * 3);
            let mut flags = Vec::with_capacity(w);
            for i in 0..w {
                let du = diff(w, i, |x| pos(x, j));
                let dv = diff(h, j, |y| pos(i, y));
                let n = match (du, dv) {
                    (Some(du), Some(dv)) => {
                        let c = du.cross(&dv);
                        let scale = du.norm() * dv.norm();
                        (c.norm() > 1e-12 * scale && c.norm().is_finite()).then(|| {
                            let c = c.normalize();
                            if c.dot(&pos(i, j)) > 0.0 { -c } else { c }
                        })
                    }
                    _ => None,
                };
                flags.push(n.is_none());
                normals.extend(n.unwrap_or(fallback).iter());
            }
            (normals, flags)
        })
        .collect();

    let mut data = Vec::with_capacity(w * h * 3);
    let mut mask = Vec::with_capacity(w * h);
    for (n, f) in rows {
        data.extend(n);
        mask.extend(f);
    }
    Ok((Map::from_vec(w, h, 3, data)?, mask))
}

/// Magnitude of the central-difference depth gradient (per pixel step).
pub fn depth_gradient(depth: &Map) -> Result<Map> {
    check_depth(depth)?;
    let (w, h) = (depth.width, depth.height);
    let d = |i: usize, j: usize| depth.get(i, j, 0);
    Ok(Map::from_fn(w, h, 1, |i, j, _| {
        let gx = diff(w, i, |x| d(x, j)).unwrap_or(0.0);
        let gy = diff(h, j, |y| d(i, y)).unwrap_or(0.0);
        gx.hypot(gy)
    }))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Reprojection {
    pub u: f64,
    pub v: f64,
    /// Distance from the 3-D point to the other camera center.
    pub distance: f64,
    /// The other view's z-depth sampled bilinearly at `(u, v)`.
    pub sampled_depth: Option<f64>,
    /// `sampled_depth` converted to distance along the other camera's pixel ray.
    pub sampled_distance: Option<f64>,
    pub in_front: bool,
    pub in_frame: bool,
}

impl Reprojection {
    pub fn valid(&self) -> bool {
        self.in_front && self.in_frame
    }
}

/// Projects the target pixel `(u, v)` at z-depth `depth` into `other_cam`.
pub fn reproject(
    u: f64,
    v: f64,
    depth: f64,
    target_cam: &Camera,
    other_cam: &Camera,
    other_depth: &Map,
) -> Result<Reprojection> {
    if !(depth > 0.0 && depth.is_finite()) {
        return invalid(format!("depth must be positive (got {depth})"));
    }
    if other_depth.channels != 1 {
        return invalid("depth map must be single-channel");
    }
    let p_world = target_cam.backproject(u, v, depth);
    let p_other = other_cam.to_camera(&p_world);
    let distance = p_other.norm();
    let Some((u2, v2)) = other_cam.project_camera(&p_other) else {
        return Ok(Reprojection {
            u: f64::NAN,
            v: f64::NAN,
            distance,
            sampled_depth: None,
            sampled_distance: None,
            in_front: false,
            in_frame: false,
        });
    };
    let mut s = [0.0];
    let sampled = other_depth.bilinear_into(u2, v2, &mut s).then_some(s[0]);
    Ok(Reprojection {
        u: u2,
        v: v2,
        distance,
        sampled_depth: sampled,
        sampled_distance: sampled.map(|d| d * other_cam.ray(u2, v2).norm()),
        in_front: true,
        in_frame: sampled.is_some(),
    })
}

/// `max(-ln|d - z|, 0)`, capped at [`PROJECTION_ERROR_CAP`].
pub fn projection_error(d: f64, z: f64) -> f64 {
    let diff = (d - z).abs();
    if diff.is_nan() {
        return 0.0;
    }
    if diff == 0.0 {
        return PROJECTION_ERROR_CAP;
    }
    (-diff.ln()).clamp(0.0, PROJECTION_ERROR_CAP)
}

/// `e / |e|_1`, uniform when every error is zero. Views flagged invalid
/// contribute zero error.
pub fn multiview_weights(errors: &[f64], valid: Option<&[bool]>) -> Result<Vec<f64>> {
    if errors.is_empty() {
        return invalid("need at least one view");
    }
    if let Some(v) = valid {
        if v.len() != errors.len() {
            return invalid("validity flags must match the error vector");
        }
    }
    if let Some(e) = errors.iter().find(|e| !(e.is_finite() && **e >= 0.0)) {
        return invalid(format!("projection errors must be non-negative (got {e})"));
    }
    let e: Vec<f64> = errors
        .iter()
        .enumerate()
        .map(|(k, e)| if valid.is_none_or(|v| v[k]) { *e } else { 0.0 })
        .collect();
    let total: f64 = e.iter().sum();
    if total == 0.0 {
        return Ok(vec![1.0 / e.len() as f64; e.len()]);
    }
    Ok(e.iter().map(|v| v / total).collect())
}

/// Per-pixel multi-view weights for the target view: one single-channel map
/// per view.
pub fn view_weight_maps(bundle: &ViewBundle) -> Result<Vec<Map>> {
    bundle.validate()?;
    let target = bundle.target();
    let (w, h, k) = (bundle.width(), bundle.height(), bundle.views.len());
    let rows: Vec<Vec<f64>> = (0..h)
        .into_par_iter()
        .map(|j| -> Result<Vec<f64>> {
            let mut out = Vec::with_capacity(w * k);
            for i in 0..w {
                let (u, v) = (i as f64, j as f64);
                let d = target.depth.get(i, j, 0);
                let mut errors = Vec::with_capacity(k);
                let mut valid = Vec::with_capacity(k);
                for view in &bundle.views {
                    let r = reproject(u, v, d, &target.camera, &view.camera, &view.depth)?;
                    valid.push(r.valid());
                    errors.push(r.sampled_distance.map_or(0.0, |s| projection_error(s, r.distance)));
                }
                out.extend(multiview_weights(&errors, Some(&valid))?);
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok((0..k)
        .map(|view| {
            Map::from_fn(w, h, 1, |i, j, _| rows[j][i * k + view])
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Rotation3;

    fn cam() -> Camera {
        Camera::identity(40.0, 40.0, 15.5, 11.5).unwrap()
    }

    #[test]
    fn constant_depth_faces_camera() {
        let depth = Map::filled(32, 24, 1, 2.0);
        let (n, mask) = depth_to_normal(&depth, &cam()).unwrap();
        assert!(mask.iter().all(|m| !m));
        for p in n.data.chunks(3) {
            assert!(p[0].abs() < 1e-12 && p[1].abs() < 1e-12 && (p[2] + 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn tilted_plane_normal_is_analytic() {
        // Plane z = z0 + a x: z-depth along ray (x', y', 1) is z0 / (1 - a x').
        let (z0, a) = (3.0, 0.4);
        let c = cam();
        let depth = Map::from_fn(32, 24, 1, |i, j, _| z0 / (1.0 - a * c.ray(i as f64, j as f64).x));
        let (n, _) = depth_to_normal(&depth, &c).unwrap();
        let expect = Vec3::new(a, 0.0, -1.0).normalize();
        for p in n.data.chunks(3) {
            let got = Vec3::new(p[0], p[1], p[2]);
            assert!(got.dot(&expect) > (1e-9f64).cos() - 1e-12);
        }
    }

    #[test]
    fn single_column_is_degenerate() {
        let depth = Map::filled(1, 4, 1, 1.0);
        let (n, mask) = depth_to_normal(&depth, &cam()).unwrap();
        assert!(mask.iter().all(|m| *m));
        assert_eq!(&n.data[..3], &[0.0, 0.0, -1.0]);
    }

    #[test]
    fn gradient_cases() {
        let g = depth_gradient(&Map::filled(5, 4, 1, 3.0)).unwrap();
        assert!(g.data.iter().all(|v| *v == 0.0));
        let g = depth_gradient(&Map::from_fn(5, 4, 1, |i, _, _| 1.0 + i as f64)).unwrap();
        assert!(g.data.iter().all(|v| *v == 1.0));
    }

    #[test]
    fn reprojection_cases() {
        let c = cam();
        let depth = Map::filled(32, 24, 1, 2.0);
        let r = reproject(7.0, 5.0, 2.0, &c, &c, &depth).unwrap();
        assert!((r.u - 7.0).abs() < 1e-12 && (r.v - 5.0).abs() < 1e-12);
        assert!((r.distance - 2.0 * c.ray(7.0, 5.0).norm()).abs() < 1e-12);
        assert!((r.sampled_distance.unwrap() - r.distance).abs() < 1e-12);

        let tx = 0.1;
        let moved = Camera::new(40.0, 40.0, 15.5, 11.5, Matrix3::identity(), Vec3::new(tx, 0.0, 0.0)).unwrap();
        let r = reproject(7.0, 5.0, 2.0, &c, &moved, &depth).unwrap();
        assert!((r.u - (7.0 - 40.0 * tx / 2.0)).abs() < 1e-12);

        let flipped = Camera::new(
            40.0, 40.0, 15.5, 11.5,
            *Rotation3::from_axis_angle(&Vec3::y_axis(), std::f64::consts::PI).matrix(),
            Vec3::zeros(),
        )
        .unwrap();
        let r = reproject(7.0, 5.0, 2.0, &c, &flipped, &depth).unwrap();
        assert!(!r.in_front && !r.valid());
    }

    #[test]
    fn projection_error_cases() {
        assert_eq!(projection_error(3.0, 2.0), 0.0);
        assert!((projection_error(1.0 + (-2.0f64).exp(), 1.0) - 2.0).abs() < 1e-12);
        assert_eq!(projection_error(10.0, 0.0), 0.0);
        assert_eq!(projection_error(1.0, 1.0), PROJECTION_ERROR_CAP);
    }

    #[test]
    fn weight_cases() {
        assert_eq!(multiview_weights(&[1.0, 1.0, 2.0], None).unwrap(), vec![0.25, 0.25, 0.5]);
        assert_eq!(multiview_weights(&[0.0, 3.0, 0.0], None).unwrap(), vec![0.0, 1.0, 0.0]);
        assert_eq!(multiview_weights(&[0.0; 3], None).unwrap(), vec![1.0 / 3.0; 3]);
        assert_eq!(
            multiview_weights(&[1.0, 1.0, 2.0], Some(&[true, true, false])).unwrap(),
            vec![0.5, 0.5, 0.0]
        );
        assert!(multiview_weights(&[-1.0], None).is_err());
    }

    #[test]
    fn camera_json_round_trip() {
        let c = Camera::new(
            50.0, 51.0, 10.0, 9.0,
            *Rotation3::from_euler_angles(0.1, -0.2, 0.3).matrix(),
            Vec3::new(1.0, 2.0, 3.0),
        )
        .unwrap();
        let s = serde_json::to_string(&c).unwrap();
        assert!(s.contains("world_from_camera"));
        let back: Camera = serde_json::from_str(&s).unwrap();
        assert_eq!(back, c);
        let bad = s.replace("\"fx\":50.0", "\"fx\":-1.0");
        assert!(serde_json::from_str::<Camera>(&bad).is_err());
    }
}

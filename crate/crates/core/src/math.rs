//! Small vector helpers shared by the lighting and rendering modules.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub type Vec3 = Vector3<f64>;
/// Linear RGB radiance or reflectance.
pub type Rgb = Vector3<f64>;

/// Tolerance used when a caller promises a unit vector.
pub const UNIT_TOL: f64 = 1e-6;

pub fn check_unit(v: &Vec3, what: &str) -> Result<()> {
    let n = v.norm();
    if !n.is_finite() || (n - 1.0).abs() > UNIT_TOL {
        return invalid(format!("{what} must be unit length (norm = {n})"));
    }
    Ok(())
}

/// Unit vector from polar angle `theta` (measured from +z) and azimuth `phi`.
pub fn spherical_to_unit(theta: f64, phi: f64) -> Vec3 {
    let (st, ct) = theta.sin_cos();
    let (sp, cp) = phi.sin_cos();
    Vec3::new(st * cp, st * sp, ct)
}

/// Partial derivatives of [`spherical_to_unit`] with respect to theta and phi.
pub fn spherical_partials(theta: f64, phi: f64) -> (Vec3, Vec3) {
    let (st, ct) = theta.sin_cos();
    let (sp, cp) = phi.sin_cos();
    (
        Vec3::new(ct * cp, ct * sp, -st),
        Vec3::new(-st * sp, st * cp, 0.0),
    )
}

/// Inverse of [`spherical_to_unit`]; phi is wrapped to [-pi, pi).
pub fn unit_to_spherical(v: &Vec3) -> (f64, f64) {
    let n = v.norm();
    let theta = (v.z / n).clamp(-1.0, 1.0).acos();
    let mut phi = v.y.atan2(v.x);
    if phi >= std::f64::consts::PI {
        phi -= 2.0 * std::f64::consts::PI;
    }
    (theta, phi)
}

pub fn reflect(dir: &Vec3, normal: &Vec3) -> Vec3 {
    dir - 2.0 * dir.dot(normal) * normal
}

/// Orthonormal right-handed basis; `tangent x bitangent = normal`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub normal: Vec3,
    pub tangent: Vec3,
    pub bitangent: Vec3,
}

impl Frame {
    /// Builds a frame around `normal` with a deterministic tangent choice.
    pub fn from_normal(normal: &Vec3) -> Result<Self> {
        let n = normal.normalize();
        if !n.iter().all(|c| c.is_finite()) {
            return invalid("frame normal must be finite and non-zero");
        }
        // Pick the world axis least aligned with n as the tangent seed.
        let helper = if n.x.abs() <= n.y.abs() && n.x.abs() <= n.z.abs() {
            Vec3::x()
        } else if n.y.abs() <= n.z.abs() {
            Vec3::y()
        } else {
            Vec3::z()
        };
        let tangent = (helper - n * n.dot(&helper)).normalize();
        let bitangent = n.cross(&tangent);
        Ok(Self {
            normal: n,
            tangent,
            bitangent,
        })
    }

    pub fn new(normal: Vec3, tangent: Vec3, bitangent: Vec3) -> Result<Self> {
        let f = Self {
            normal,
            tangent,
            bitangent,
        };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        for (v, name) in [
            (&self.normal, "frame normal"),
            (&self.tangent, "frame tangent"),
            (&self.bitangent, "frame bitangent"),
        ] {
            check_unit(v, name)?;
        }
        let ortho = self.normal.dot(&self.tangent).abs()
            + self.normal.dot(&self.bitangent).abs()
            + self.tangent.dot(&self.bitangent).abs();
        if ortho > 1e-6 {
            return invalid("frame vectors must be mutually orthogonal");
        }
        if (self.tangent.cross(&self.bitangent) - self.normal).norm() > 1e-6 {
            return invalid("frame must be right-handed");
        }
        Ok(())
    }

    pub fn to_world(&self, local: &Vec3) -> Vec3 {
        self.tangent * local.x + self.bitangent * local.y + self.normal * local.z
    }

    pub fn to_local(&self, world: &Vec3) -> Vec3 {
        Vec3::new(
            world.dot(&self.tangent),
            world.dot(&self.bitangent),
            world.dot(&self.normal),
        )
    }
}

impl Default for Frame {
    fn default() -> Self {
        Self {
            normal: Vec3::z(),
            tangent: Vec3::x(),
            bitangent: Vec3::y(),
        }
    }
}

pub(crate) fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

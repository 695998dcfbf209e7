//! Microfacet shading against discrete and spherical-Gaussian lighting.
//!
//! `v` points from the surface toward the viewer and `l` toward the light.
//! The specular lobe is GGX (`alpha = r^2`) with the height-correlated Smith
//! masking term and Schlick Fresnel with a fixed `f0`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::envmap::EnvMapGrid;
use crate::error::{invalid, Result};
use crate::math::{check_unit, Frame, Rgb, Vec3};
use crate::sg::SgEnvironment;

pub const F0: f64 = 0.05;
/// Roughness floor applied before squaring, keeping the GGX peak finite.
pub const MIN_ROUGHNESS: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaterialSample {
    pub albedo: Rgb,
    pub roughness: f64,
    pub normal: Vec3,
}

impl MaterialSample {
    pub fn new(albedo: Rgb, roughness: f64, normal: Vec3) -> Result<Self> {
        let m = Self {
            albedo,
            roughness,
            normal,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.albedo.iter().all(|a| (0.0..=1.0).contains(a)) {
            return invalid("albedo components must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.roughness) {
            return invalid(format!("roughness must lie in [0, 1] (got {})", self.roughness));
        }
        check_unit(&self.normal, "normal")
    }
}

pub fn half_vector(v: &Vec3, l: &Vec3) -> Result<Vec3> {
    let s = v + l;
    let n = s.norm();
    if !(n > 1e-12) {
        return invalid("half vector is undefined for opposite directions");
    }
    Ok(s / n)
}

pub fn fresnel_schlick(v: &Vec3, h: &Vec3, f0: f64) -> f64 {
    f0 + (1.0 - f0) * (1.0 - v.dot(h).max(0.0)).powi(5)
}

fn ggx_alpha(r: f64) -> f64 {
    let r = r.clamp(MIN_ROUGHNESS, 1.0);
    r * r
}

/// GGX normal distribution for `cos = n . h`.
pub fn ggx_d(cos: f64, r: f64) -> f64 {
    let a2 = ggx_alpha(r).powi(2);
    let t = cos * cos * (a2 - 1.0) + 1.0;
    a2 / (PI * t * t)
}

fn smith_lambda(cos: f64, a2: f64) -> f64 {
    let c2 = cos * cos;
    0.5 * ((1.0 + a2 * (1.0 - c2) / c2).sqrt() - 1.0)
}

/// Height-correlated Smith masking-shadowing for `n . v` and `n . l`.
pub fn smith_g(nv: f64, nl: f64, r: f64) -> f64 {
    let a2 = ggx_alpha(r).powi(2);
    1.0 / (1.0 + smith_lambda(nv, a2) + smith_lambda(nl, a2))
}

pub fn specular_brdf(v: &Vec3, l: &Vec3, n: &Vec3, r: f64) -> f64 {
    let nl = n.dot(l);
    let nv = n.dot(v);
    if nl <= 0.0 || nv <= 0.0 {
        return 0.0;
    }
    let Ok(h) = half_vector(v, l) else {
        return 0.0;
    };
    ggx_d(n.dot(&h), r) * fresnel_schlick(v, &h, F0) * smith_g(nv, nl, r) / (4.0 * nl * nv)
}

/// `(a / pi) sum L(l) (n . l) dw` with the env frame normal as `n`.
pub fn render_diffuse(albedo: &Rgb, env: &EnvMapGrid) -> Rgb {
    let mut acc = Rgb::zeros();
    for row in 0..env.height() {
        let (theta, _) = env.texel_angles(row, 0);
        let w = theta.cos().max(0.0) * env.texel_solid_angle(row);
        let row_sum: Rgb = (0..env.width()).map(|col| env.get(row, col)).sum();
        acc += row_sum * w;
    }
    albedo.component_mul(&acc) / PI
}

/// `sum L(l) B_s(v, l, n, r) (n . l) dw` with the material normal as `n`.
pub fn render_specular(material: &MaterialSample, env: &EnvMapGrid, v: &Vec3) -> Rgb {
    let n = &material.normal;
    let mut acc = Rgb::zeros();
    for row in 0..env.height() {
        let dw = env.texel_solid_angle(row);
        for col in 0..env.width() {
            let radiance = env.get(row, col);
            if radiance == Rgb::zeros() {
                continue;
            }
            let l = env.texel_direction(row, col);
            let f = specular_brdf(v, &l, n, material.roughness);
            if f > 0.0 {
                acc += radiance * (f * n.dot(&l) * dw);
            }
        }
    }
    acc
}

/// Diffuse and specular renders, kept apart so they can be scaled separately.
pub fn rerender_pixel(material: &MaterialSample, env: &EnvMapGrid, v: &Vec3) -> (Rgb, Rgb) {
    (render_diffuse(&material.albedo, env), render_specular(material, env, v))
}

/// Per-lobe encoding of the specular integrand.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpecFeatureInput {
    pub fresnel: f64,
    pub ndoth_sq: f64,
    pub ndotxi: f64,
    pub ndotv: f64,
    /// Visibility-scaled lobe intensity.
    pub eta: Rgb,
    pub lambda: f64,
    pub mask: bool,
}

pub fn spec_feature_inputs(env: &SgEnvironment, n: &Vec3, v: &Vec3) -> Result<Vec<SpecFeatureInput>> {
    check_unit(n, "normal")?;
    check_unit(v, "view direction")?;
    Ok(env
        .lobes()
        .iter()
        .zip(env.visibility())
        .map(|(lobe, mu)| {
            let xi = lobe.axis();
            let eta = lobe.intensity * *mu;
            let ndotxi = n.dot(&xi);
            let ndotv = n.dot(v);
            match half_vector(v, &xi) {
                Ok(h) => SpecFeatureInput {
                    fresnel: fresnel_schlick(v, &h, F0),
                    ndoth_sq: n.dot(&h).powi(2),
                    ndotxi,
                    ndotv,
                    eta,
                    lambda: lobe.sharpness,
                    mask: eta.abs().sum() * ndotxi > 0.0,
                },
                Err(_) => SpecFeatureInput {
                    fresnel: 1.0,
                    ndoth_sq: 0.0,
                    ndotxi,
                    ndotv,
                    eta,
                    lambda: lobe.sharpness,
                    mask: false,
                },
            }
        })
        .collect())
}

/// Axis and sharpness of the product of two SG lobes.
fn sg_product_lobe(x1: &Vec3, l1: f64, x2: &Vec3, l2: f64) -> (Vec3, f64) {
    let um = x1 * l1 + x2 * l2;
    let lm = um.norm();
    if lm < 1e-9 {
        (if l2 > 0.0 { *x2 } else { *x1 }, 0.0)
    } else {
        (um / lm, lm)
    }
}

/// Density of the normalized lobe `exp(sharp (axis . l - 1))` on the sphere.
fn sg_pdf(axis: &Vec3, sharp: f64, l: &Vec3) -> f64 {
    if sharp < 1e-9 {
        return 1.0 / (4.0 * PI);
    }
    let norm = 2.0 * PI * -(-2.0 * sharp).exp_m1() / sharp;
    (-0.5 * sharp * (l - axis).norm_squared()).exp() / norm
}

const RINGS: usize = 8;
const SPOKES: usize = 12;

/// Stratified directions: equal-probability rings in `cos` (given by
/// `ring_cos`) times evenly spaced azimuths about `axis`.
fn ring_nodes(axis: &Vec3, ring_cos: impl Fn(f64) -> f64) -> Vec<Vec3> {
    let frame = Frame::from_normal(axis).unwrap_or_default();
    let mut out = Vec::with_capacity(RINGS * SPOKES);
    for ring in 0..RINGS {
        let cos = ring_cos((ring as f64 + 0.5) / RINGS as f64).clamp(-1.0, 1.0);
        let sin = (1.0 - cos * cos).max(0.0).sqrt();
        for spoke in 0..SPOKES {
            let phi = 2.0 * PI * (spoke as f64 + 0.5) / SPOKES as f64;
            out.push(frame.to_world(&Vec3::new(sin * phi.cos(), sin * phi.sin(), cos)));
        }
    }
    out
}

/// Specular radiance from SG lighting without rasterizing the environment.
///
/// The GGX lobe is approximated by a spherical Gaussian about the reflected
/// view direction; its product with each masked light lobe is a closed-form
/// SG that supplies one set of quadrature nodes. A second set follows the
/// GGX distribution itself, covering its long tail. Both sets are combined
/// with balance-heuristic weights and evaluate the exact lobe and BRDF.
pub fn sg_render_specular(material: &MaterialSample, env: &SgEnvironment, v: &Vec3) -> Result<Rgb> {
    let n = material.normal;
    let r = material.roughness;
    let features = spec_feature_inputs(env, &n, v)?;
    let nv = n.dot(v);
    if nv <= 0.0 {
        return Ok(Rgb::zeros());
    }
    let a2 = ggx_alpha(r).powi(2);
    let refl = (2.0 * nv * n - v).normalize();
    let warped_sharp = 2.0 / a2 / (4.0 * nv);

    // GGX nodes: cos^2 of the half-vector angle from the inverse CDF of D (n.h).
    let ggx_nodes: Vec<Vec3> = ring_nodes(&n, |q| ((1.0 - q) / (1.0 + q * (a2 - 1.0))).sqrt())
        .into_iter()
        .filter(|h| v.dot(h) > 0.0)
        .map(|h| 2.0 * v.dot(&h) * h - v)
        .collect();
    let ggx_pdf = |l: &Vec3| -> f64 {
        match half_vector(v, l) {
            Ok(h) if v.dot(&h) > 0.0 => ggx_d(n.dot(&h), r) * n.dot(&h).max(0.0) / (4.0 * v.dot(&h)),
            _ => 0.0,
        }
    };
    let per_set = (RINGS * SPOKES) as f64;

    let mut acc = Rgb::zeros();
    for (lobe, feat) in env.lobes().iter().zip(&features) {
        if !feat.mask {
            continue;
        }
        let (axis, sharp) = sg_product_lobe(&lobe.axis(), lobe.sharpness, &refl, warped_sharp);
        let sg_nodes = ring_nodes(&axis, |q| {
            // Quantile of the density proportional to exp(-sharp u), u = 1 - cos on [0, 2].
            let u = if sharp < 1e-9 {
                2.0 * q
            } else {
                -(q * (-2.0 * sharp).exp_m1()).ln_1p() / sharp
            };
            1.0 - u
        });
        let mut sum = 0.0;
        for l in sg_nodes.iter().chain(&ggx_nodes) {
            let f = specular_brdf(v, l, &n, r);
            if f <= 0.0 {
                continue;
            }
            let mix = per_set * (sg_pdf(&axis, sharp, l) + ggx_pdf(l));
            sum += lobe.falloff(l) * f * n.dot(l) / mix;
        }
        acc += feat.eta * sum;
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{spherical_to_unit, Frame};
    use crate::sg::SgLobe;

    #[test]
    fn half_vector_cases() {
        let v = Vec3::new(0.0, 0.0, 1.0);
        assert_eq!(half_vector(&v, &v).unwrap(), v);
        let h = half_vector(&v, &Vec3::x()).unwrap();
        let s = 0.5f64.sqrt();
        assert!((h - Vec3::new(s, 0.0, s)).norm() < 1e-15);
        assert!(half_vector(&v, &-v).is_err());
    }

    #[test]
    fn fresnel_cases() {
        let v = Vec3::z();
        assert_eq!(fresnel_schlick(&v, &v, F0), F0);
        assert_eq!(fresnel_schlick(&v, &Vec3::x(), F0), 1.0);
        let h = Vec3::new((0.75f64).sqrt(), 0.0, 0.5);
        assert!((fresnel_schlick(&v, &h, 0.05) - 0.0796875).abs() < 1e-15);
    }

    #[test]
    fn brdf_below_horizon_is_zero() {
        let n = Vec3::z();
        let l = Vec3::new(0.6, 0.0, -0.8);
        assert_eq!(specular_brdf(&n, &l, &n, 0.5), 0.0);
    }

    #[test]
    fn furnace_and_black() {
        let env = EnvMapGrid::constant(16, 32, Frame::default(), Rgb::repeat(2.0)).unwrap();
        let a = Rgb::new(0.2, 0.5, 0.9);
        let out = render_diffuse(&a, &env);
        for c in 0..3 {
            assert!((out[c] / (2.0 * a[c]) - 1.0).abs() < 0.01);
        }
        let black = EnvMapGrid::black(16, 32, Frame::default()).unwrap();
        assert_eq!(render_diffuse(&a, &black), Rgb::zeros());
        let m = MaterialSample::new(a, 0.3, Vec3::z()).unwrap();
        assert_eq!(rerender_pixel(&m, &black, &Vec3::z()), (Rgb::zeros(), Rgb::zeros()));
    }

    #[test]
    fn single_texel_diffuse() {
        let mut env = EnvMapGrid::black(8, 16, Frame::default()).unwrap();
        env.set(3, 5, Rgb::new(4.0, 0.0, 1.0));
        let a = Rgb::new(0.5, 0.5, 0.5);
        let (theta, _) = env.texel_angles(3, 5);
        let expect = 0.5 / PI * theta.cos() * env.texel_solid_angle(3);
        let out = render_diffuse(&a, &env);
        assert!((out.x - 4.0 * expect).abs() < 1e-15 && out.y == 0.0);
    }

    #[test]
    fn spec_feature_masks() {
        let n = Vec3::z();
        let dark = SgLobe::new(0.0, 0.0, 5.0, Rgb::zeros()).unwrap();
        let below = SgLobe::from_axis(&Vec3::new(0.75f64.sqrt(), 0.0, -0.5), 5.0, Rgb::repeat(1.0)).unwrap();
        let aligned = SgLobe::new(0.0, 0.0, 5.0, Rgb::repeat(1.0)).unwrap();
        let env = SgEnvironment::new(vec![dark, below, aligned]).unwrap();
        let f = spec_feature_inputs(&env, &n, &n).unwrap();
        assert!(!f[0].mask && !f[1].mask && f[2].mask);
        assert_eq!((f[2].ndoth_sq, f[2].ndotxi, f[2].ndotv), (1.0, 1.0, 1.0));
    }

    #[test]
    fn sg_specular_is_linear_in_intensity() {
        let m = MaterialSample::new(Rgb::repeat(0.5), 0.5, Vec3::z()).unwrap();
        let v = spherical_to_unit(0.4, 0.3);
        let lobe = SgLobe::new(0.5, 2.0, 8.0, Rgb::new(1.0, 2.0, 3.0)).unwrap();
        let one = sg_render_specular(&m, &SgEnvironment::new(vec![lobe]).unwrap(), &v).unwrap();
        let twice = SgLobe {
            intensity: lobe.intensity * 2.0,
            ..lobe
        };
        let two = sg_render_specular(&m, &SgEnvironment::new(vec![twice]).unwrap(), &v).unwrap();
        assert_eq!(two, one * 2.0);
        assert!(one.x > 0.0);
    }
}

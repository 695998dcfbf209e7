//! Spherical-Gaussian lobes and multi-lobe environments.
//!
//! A lobe radiates `eta * exp(lambda * (l . xi - 1))` toward direction `l`.
//! Environments sum their lobes, each scaled by a visibility factor in `[0, 1]`.

use crate::envmap::EnvMapGrid;
use crate::error::{invalid, Result};
use crate::math::{check_unit, spherical_to_unit, unit_to_spherical, Frame, Rgb, Vec3};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgLobe {
    /// Polar angle of the lobe axis, radians in `[0, pi]`.
    pub theta: f64,
    /// Azimuth of the lobe axis, radians in `[-pi, pi)`.
    pub phi: f64,
    pub sharpness: f64,
    pub intensity: Rgb,
}

impl SgLobe {
    pub fn new(theta: f64, phi: f64, sharpness: f64, intensity: Rgb) -> Result<Self> {
        let lobe = Self {
            theta,
            phi,
            sharpness,
            intensity,
        };
        lobe.validate()?;
        Ok(lobe)
    }

    /// Lobe whose axis points along `axis` (normalized internally).
    pub fn from_axis(axis: &Vec3, sharpness: f64, intensity: Rgb) -> Result<Self> {
        let (theta, phi) = unit_to_spherical(axis);
        Self::new(theta, phi, sharpness, intensity)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.theta.is_finite() && self.phi.is_finite()) {
            return invalid("lobe axis angles must be finite");
        }
        if !(self.sharpness.is_finite() && self.sharpness >= 0.0) {
            return invalid(format!("lobe sharpness must be >= 0 (got {})", self.sharpness));
        }
        if !self.intensity.iter().all(|c| c.is_finite() && *c >= 0.0) {
            return invalid("lobe intensity components must be finite and >= 0");
        }
        Ok(())
    }

    pub fn axis(&self) -> Vec3 {
        spherical_to_unit(self.theta, self.phi)
    }

    /// Radiance toward `dir`; `dir` must be unit length.
    pub fn eval(&self, dir: &Vec3) -> Result<Rgb> {
        check_unit(dir, "direction")?;
        Ok(self.eval_unchecked(dir))
    }

    #[inline]
    pub(crate) fn eval_unchecked(&self, dir: &Vec3) -> Rgb {
        self.intensity * self.falloff(dir)
    }

    /// `exp(lambda (dir . xi - 1))`, written with the half-chord identity
    /// `1 - dir . xi = |dir - xi|^2 / 2` so the peak evaluates to exactly 1.
    #[inline]
    pub(crate) fn falloff(&self, dir: &Vec3) -> f64 {
        let chord = (dir - self.axis()).norm_squared();
        (-0.5 * self.sharpness * chord).exp()
    }
}

/// Free-function form of [`SgLobe::eval`].
pub fn eval_sg(lobe: &SgLobe, dir: &Vec3) -> Result<Rgb> {
    lobe.eval(dir)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SgEnvironment {
    lobes: Vec<SgLobe>,
    visibility: Vec<f64>,
}

impl SgEnvironment {
    /// Environment with every lobe fully visible.
    pub fn new(lobes: Vec<SgLobe>) -> Result<Self> {
        let n = lobes.len();
        Self::with_visibility(lobes, vec![1.0; n])
    }

    pub fn with_visibility(lobes: Vec<SgLobe>, visibility: Vec<f64>) -> Result<Self> {
        if lobes.is_empty() {
            return invalid("an SG environment needs at least one lobe");
        }
        if lobes.len() != visibility.len() {
            return invalid(format!(
                "{} lobes but {} visibility values",
                lobes.len(),
                visibility.len()
            ));
        }
        for l in &lobes {
            l.validate()?;
        }
        if let Some(mu) = visibility.iter().find(|m| !(0.0..=1.0).contains(*m)) {
            return invalid(format!("visibility must lie in [0, 1] (got {mu})"));
        }
        Ok(Self { lobes, visibility })
    }

    pub fn lobes(&self) -> &[SgLobe] {
        &self.lobes
    }

    pub fn visibility(&self) -> &[f64] {
        &self.visibility
    }

    pub fn len(&self) -> usize {
        self.lobes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lobes.is_empty()
    }

    /// Incident radiance from direction `dir`.
    pub fn eval(&self, dir: &Vec3) -> Result<Rgb> {
        check_unit(dir, "direction")?;
        Ok(self.eval_unchecked(dir))
    }

    #[inline]
    pub(crate) fn eval_unchecked(&self, dir: &Vec3) -> Rgb {
        self.lobes
            .iter()
            .zip(&self.visibility)
            .fold(Rgb::zeros(), |acc, (lobe, mu)| {
                acc + lobe.eval_unchecked(dir) * *mu
            })
    }

    /// Samples the environment at the texel centers of a hemispherical grid.
    pub fn rasterize(&self, height: usize, width: usize, frame: &Frame) -> Result<EnvMapGrid> {
        let mut grid = EnvMapGrid::black(height, width, *frame)?;
        for i in 0..height {
            for j in 0..width {
                let d = grid.texel_direction(i, j);
                grid.set(i, j, self.eval_unchecked(&d));
            }
        }
        Ok(grid)
    }
}

pub fn eval_env(env: &SgEnvironment, dir: &Vec3) -> Result<Rgb> {
    env.eval(dir)
}

pub fn rasterize_env(
    env: &SgEnvironment,
    height: usize,
    width: usize,
    frame: &Frame,
) -> Result<EnvMapGrid> {
    env.rasterize(height, width, frame)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn white(c: f64) -> Rgb {
        Rgb::new(c, c, c)
    }

    #[test]
    fn peak_is_exact() {
        let lobe = SgLobe::new(0.7, -1.3, 12.0, Rgb::new(1.5, 0.2, 3.0)).unwrap();
        assert_eq!(lobe.eval(&lobe.axis()).unwrap(), lobe.intensity);
    }

    #[test]
    fn zero_sharpness_is_constant() {
        let lobe = SgLobe::new(0.2, 0.4, 0.0, white(2.0)).unwrap();
        for d in [Vec3::x(), -Vec3::z(), Vec3::new(0.6, 0.0, 0.8)] {
            assert_eq!(lobe.eval(&d).unwrap(), white(2.0));
        }
    }

    #[test]
    fn orthogonal_direction_decays_by_e() {
        let lobe = SgLobe::new(0.0, 0.0, 1.0, white(1.0)).unwrap();
        let v = lobe.eval(&Vec3::x()).unwrap();
        for c in v.iter() {
            assert!((c - (-1.0f64).exp()).abs() < 1e-15);
        }
    }

    #[test]
    fn non_unit_direction_rejected() {
        let lobe = SgLobe::new(0.0, 0.0, 1.0, white(1.0)).unwrap();
        assert!(lobe.eval(&Vec3::new(0.0, 0.0, 1.01)).is_err());
        assert!(lobe.eval(&Vec3::new(0.0, 0.0, 1.0 + 5e-7)).is_ok());
    }

    #[test]
    fn invalid_lobes_rejected() {
        assert!(SgLobe::new(0.0, 0.0, -1.0, white(1.0)).is_err());
        assert!(SgLobe::new(0.0, 0.0, 1.0, Rgb::new(-0.1, 0.0, 0.0)).is_err());
        assert!(SgLobe::new(0.0, 0.0, 1.0, Rgb::new(f64::NAN, 0.0, 0.0)).is_err());
        let l = SgLobe::new(0.0, 0.0, 1.0, white(1.0)).unwrap();
        assert!(SgEnvironment::new(vec![]).is_err());
        assert!(SgEnvironment::with_visibility(vec![l], vec![1.2]).is_err());
        assert!(SgEnvironment::with_visibility(vec![l], vec![1.0, 1.0]).is_err());
    }

    #[test]
    fn environment_sums_visible_lobes() {
        let a = SgLobe::new(0.3, 0.0, 0.0, Rgb::new(1.0, 0.0, 0.0)).unwrap();
        let b = SgLobe::new(1.3, 2.0, 0.0, Rgb::new(0.0, 2.0, 0.0)).unwrap();
        let env = SgEnvironment::with_visibility(vec![a, b], vec![1.0, 0.5]).unwrap();
        assert_eq!(env.eval(&Vec3::z()).unwrap(), Rgb::new(1.0, 1.0, 0.0));

        let dark = SgEnvironment::with_visibility(vec![a, b], vec![0.0, 0.0]).unwrap();
        assert_eq!(dark.eval(&Vec3::y()).unwrap(), Rgb::zeros());

        let single = SgEnvironment::new(vec![a]).unwrap();
        let d = Vec3::new(0.0, 0.6, 0.8);
        assert_eq!(single.eval(&d).unwrap(), a.eval(&d).unwrap());
    }

    #[test]
    fn falloff_monotone_in_angle() {
        let lobe = SgLobe::new(0.0, 0.0, 7.5, white(1.0)).unwrap();
        let mut last = f64::INFINITY;
        for k in 0..=64 {
            let ang = PI * k as f64 / 64.0;
            let v = lobe.eval(&spherical_to_unit(ang, 0.3)).unwrap()[0];
            assert!(v <= last);
            last = v;
        }
    }

    #[test]
    fn rasterize_constant_and_dark() {
        let c = SgLobe::new(0.4, 1.0, 0.0, white(0.75)).unwrap();
        let g = SgEnvironment::new(vec![c])
            .unwrap()
            .rasterize(8, 16, &Frame::default())
            .unwrap();
        assert!(g.texels().iter().all(|t| *t == white(0.75)));
        let g = SgEnvironment::with_visibility(vec![c], vec![0.0])
            .unwrap()
            .rasterize(8, 16, &Frame::default())
            .unwrap();
        assert!(g.texels().iter().all(|t| *t == Rgb::zeros()));
    }
}

#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use invrender::math::spherical_to_unit;
use invrender::{Rgb, SgEnvironment, SgLobe, Vec3};

pub fn unit(rng: &mut ChaCha8Rng) -> Vec3 {
    let z: f64 = rng.random_range(-1.0..1.0);
    let phi: f64 = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
    let r = (1.0 - z * z).sqrt();
    Vec3::new(r * phi.cos(), r * phi.sin(), z)
}

pub fn upper_unit(rng: &mut ChaCha8Rng) -> Vec3 {
    let v = unit(rng);
    Vec3::new(v.x, v.y, v.z.abs().max(1e-3)).normalize()
}

pub fn rgb(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Rgb {
    Rgb::new(rng.random_range(lo..hi), rng.random_range(lo..hi), rng.random_range(lo..hi))
}

pub fn random_lobe(rng: &mut ChaCha8Rng) -> SgLobe {
    SgLobe::from_axis(&unit(rng), rng.random_range(0.0..40.0), rgb(rng, 0.0, 4.0)).unwrap()
}

pub fn random_env(rng: &mut ChaCha8Rng, lobes: usize) -> SgEnvironment {
    let l = (0..lobes).map(|_| random_lobe(rng)).collect();
    let vis = (0..lobes).map(|_| rng.random_range(0.0..1.0)).collect();
    SgEnvironment::with_visibility(l, vis).unwrap()
}

/// Three lobes with axes in the upper hemisphere, pairwise more than 60 deg apart.
pub fn separated_env(rng: &mut ChaCha8Rng) -> SgEnvironment {
    let axes = loop {
        let a: Vec<Vec3> = (0..3)
            .map(|_| spherical_to_unit(rng.random_range(0.0..1.4), rng.random_range(-3.14..3.14)))
            .collect();
        if (0..3).all(|i| (i + 1..3).all(|j| a[i].dot(&a[j]) < 0.5)) {
            break a;
        }
    };
    let lobes = axes
        .iter()
        .map(|a| SgLobe::from_axis(a, rng.random_range(2.0..30.0), rgb(rng, 0.5, 5.0)).unwrap())
        .collect();
    SgEnvironment::new(lobes).unwrap()
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub fn angle_between(a: &Vec3, b: &Vec3) -> f64 {
    a.normalize().dot(&b.normalize()).clamp(-1.0, 1.0).acos()
}

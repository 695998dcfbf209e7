mod common;

use std::f64::consts::PI;

use nalgebra::{Matrix3, Rotation3, SymmetricEigen};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{angle_between, rel_err};
use invrender::brdf::{
    render_diffuse, render_specular, rerender_pixel, sg_render_specular, spec_feature_inputs, specular_brdf,
    MaterialSample, F0,
};
use invrender::geometry::{depth_gradient, depth_to_normal, multiview_weights, projection_error, reproject, Camera};
use invrender::image::Map;
use invrender::math::spherical_to_unit;
use invrender::{EnvMapGrid, Frame, Rgb, SgEnvironment, SgLobe, Vec3};

// Scalar microfacet terms written out from the textbook formulas.
fn d_ref(cos: f64, r: f64) -> f64 {
    let a = r * r;
    let denom = cos * cos * (a * a - 1.0) + 1.0;
    a * a / (PI * denom * denom)
}

fn lambda_ref(cos: f64, r: f64) -> f64 {
    let a = r * r;
    let tan2 = (1.0 - cos * cos) / (cos * cos);
    ((1.0 + a * a * tan2).sqrt() - 1.0) / 2.0
}

fn brdf_ref(nv: f64, nl: f64, nh: f64, vh: f64, r: f64) -> f64 {
    let f = F0 + (1.0 - F0) * (1.0 - vh).powi(5);
    let g = 1.0 / (1.0 + lambda_ref(nv, r) + lambda_ref(nl, r));
    d_ref(nh, r) * f * g / (4.0 * nv * nl)
}

fn z_frame() -> Frame {
    Frame::from_normal(&Vec3::z()).unwrap()
}

fn smooth_depth(w: usize, h: usize, p: [f64; 4]) -> Map {
    Map::from_fn(w, h, 1, |i, j, _| {
        let (x, y) = (i as f64, j as f64);
        3.0 + p[0] * (p[1] * x).sin() + p[2] * (p[3] * y).cos() + 0.002 * x
    })
}

fn plane_fit_normal(points: &[Vec3]) -> Vec3 {
    let c: Vec3 = points.iter().sum::<Vec3>() / points.len() as f64;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - c;
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov);
    let k = eig.eigenvalues.imin();
    eig.eigenvectors.column(k).into_owned()
}

#[test]
fn normals_match_window_plane_fit() {
    let (w, h) = (40, 30);
    let cam = Camera::identity(50.0, 50.0, 19.5, 14.5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..5 {
        let p = [
            rng.random_range(0.05..0.3),
            rng.random_range(0.02..0.1),
            rng.random_range(0.05..0.3),
            rng.random_range(0.02..0.1),
        ];
        let depth = smooth_depth(w, h, p);
        let (normals, mask) = depth_to_normal(&depth, &cam).unwrap();
        for j in 1..h - 1 {
            for i in 1..w - 1 {
                assert!(!mask[depth.index(i, j)]);
                let pts: Vec<Vec3> = (j - 1..=j + 1)
                    .flat_map(|y| (i - 1..=i + 1).map(move |x| (x, y)))
                    .map(|(x, y)| cam.backproject_camera(x as f64, y as f64, depth.get(x, y, 0)))
                    .collect();
                let fit = plane_fit_normal(&pts);
                let got = normals.vec3(i, j);
                let angle = angle_between(&got, &fit).min(angle_between(&got, &-fit));
                assert!(angle.to_degrees() < 2.0, "({i},{j}) off by {} deg", angle.to_degrees());
            }
        }
    }
}

#[test]
fn tilted_world_plane_through_rotated_camera() {
    let rot = Rotation3::from_euler_angles(0.1, -0.2, 0.05).into_inner();
    let center = Vec3::new(0.3, -0.2, 0.5);
    let cam = Camera::new(60.0, 60.0, 24.5, 18.5, rot, center).unwrap();
    let (z0, a) = (5.0, 0.3);
    let plane_n = Vec3::new(-a, 0.0, 1.0);
    let depth = Map::from_fn(50, 38, 1, |i, j, _| {
        let dir = rot * cam.ray(i as f64, j as f64);
        (z0 - plane_n.dot(&center)) / plane_n.dot(&dir)
    });
    let (normals, mask) = depth_to_normal(&depth, &cam).unwrap();
    let mut expected = rot.transpose() * plane_n.normalize();
    if expected.dot(&cam.backproject_camera(24.5, 18.5, 1.0)) > 0.0 {
        expected = -expected;
    }
    for j in 0..38 {
        for i in 0..50 {
            assert!(!mask[depth.index(i, j)]);
            let angle = angle_between(&normals.vec3(i, j), &expected).to_degrees();
            assert!(angle < 0.5, "({i},{j}) off by {angle} deg");
        }
    }
}

#[test]
fn depth_gradient_matches_two_pass_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (w, h) = (13, 9);
    let depth = Map::from_fn(w, h, 1, |_, _, _| rng.random_range(0.5..4.0));
    let d = |i: usize, j: usize| depth.get(i, j, 0);

    let mut gx = vec![0.0; w * h];
    for j in 0..h {
        for i in 0..w {
            gx[j * w + i] = if i == 0 {
                d(1, j) - d(0, j)
            } else if i == w - 1 {
                d(w - 1, j) - d(w - 2, j)
            } else {
                (d(i + 1, j) - d(i - 1, j)) / 2.0
            };
        }
    }
    let mut gy = vec![0.0; w * h];
    for i in 0..w {
        for j in 0..h {
            gy[j * w + i] = if j == 0 {
                d(i, 1) - d(i, 0)
            } else if j == h - 1 {
                d(i, h - 1) - d(i, h - 2)
            } else {
                (d(i, j + 1) - d(i, j - 1)) / 2.0
            };
        }
    }
    let got = depth_gradient(&depth).unwrap();
    for k in 0..w * h {
        let want = (gx[k] * gx[k] + gy[k] * gy[k]).sqrt();
        assert!((got.data[k] - want).abs() <= 1e-12 * want.max(1.0));
    }
}

#[test]
fn depth_equal_to_column_index_has_unit_gradient() {
    let depth = Map::from_fn(7, 5, 1, |i, _, _| i as f64 + 1.0);
    let g = depth_gradient(&depth).unwrap();
    assert!(g.data.iter().all(|v| (v - 1.0).abs() < 1e-15));
}

#[test]
fn sideways_translation_shifts_columns() {
    let target = Camera::identity(80.0, 80.0, 31.5, 23.5).unwrap();
    let tx = 0.15;
    let other = Camera::new(80.0, 80.0, 31.5, 23.5, Matrix3::identity(), Vec3::new(tx, 0.0, 0.0)).unwrap();
    let other_depth = Map::filled(64, 48, 1, 2.0);
    for &(u, v, z) in &[(10.0, 5.0, 2.0), (40.5, 30.25, 3.5), (63.0, 47.0, 1.2)] {
        let r = reproject(u, v, z, &target, &other, &other_depth).unwrap();
        assert!((r.u - (u - 80.0 * tx / z)).abs() < 1e-9);
        assert!((r.v - v).abs() < 1e-9);
        let p = target.backproject_camera(u, v, z) - Vec3::new(tx, 0.0, 0.0);
        assert!((r.distance - p.norm()).abs() < 1e-12);
    }
}

#[test]
fn same_camera_distance_is_depth_times_ray_length() {
    let cam = Camera::identity(70.0, 65.0, 20.0, 15.0).unwrap();
    let depth = Map::filled(40, 30, 1, 2.5);
    let r = reproject(7.0, 22.0, 2.5, &cam, &cam, &depth).unwrap();
    assert!(r.valid());
    assert!((r.u - 7.0).abs() < 1e-12 && (r.v - 22.0).abs() < 1e-12);
    assert!((r.distance - 2.5 * cam.ray(7.0, 22.0).norm()).abs() < 1e-12);
    assert!((r.sampled_distance.unwrap() - r.distance).abs() < 1e-12);
}

#[test]
fn half_turn_puts_point_behind() {
    let target = Camera::identity(50.0, 50.0, 10.0, 10.0).unwrap();
    let rot = Rotation3::from_axis_angle(&Vec3::y_axis(), PI).into_inner();
    let other = Camera::new(50.0, 50.0, 10.0, 10.0, rot, Vec3::zeros()).unwrap();
    let r = reproject(10.0, 10.0, 1.0, &target, &other, &Map::filled(21, 21, 1, 1.0)).unwrap();
    assert!(!r.in_front && !r.valid());
}

proptest! {
    #[test]
    fn projection_error_never_rises(a in 0.0f64..5.0, b in 0.0f64..5.0) {
        let (near, far) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(projection_error(near, 0.0) >= projection_error(far, 0.0));
        if far >= 1.0 {
            prop_assert_eq!(projection_error(2.0 + far, 2.0), 0.0);
        }
    }

    #[test]
    fn weights_form_a_distribution(
        errs in prop::collection::vec(0.0f64..40.0, 1..10),
        flags in prop::collection::vec(any::<bool>(), 10),
    ) {
        let valid = &flags[..errs.len()];
        let w = multiview_weights(&errs, Some(valid)).unwrap();
        prop_assert!(w.iter().all(|v| *v >= 0.0));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn same_camera_round_trip(
        angles in prop::array::uniform3(-PI..PI),
        t in prop::array::uniform3(-5.0f64..5.0),
        f in 20.0f64..200.0,
        u in 0.0f64..63.0,
        v in 0.0f64..47.0,
        z in 0.05f64..50.0,
    ) {
        let rot = Rotation3::from_euler_angles(angles[0], angles[1], angles[2]).into_inner();
        let cam = Camera::new(f, f * 1.1, 31.5, 23.5, rot, Vec3::from(t)).unwrap();
        let r = reproject(u, v, z, &cam, &cam, &Map::filled(64, 48, 1, z)).unwrap();
        prop_assert!(r.valid());
        prop_assert!((r.u - u).abs() <= 1e-6 && (r.v - v).abs() <= 1e-6);
    }

    #[test]
    fn normals_are_unit_and_face_camera(
        p in (0.0f64..1.0, 0.01f64..0.5, 0.0f64..1.0, 0.01f64..0.5),
        f in 10.0f64..100.0,
    ) {
        let depth = smooth_depth(12, 10, [p.0, p.1, p.2, p.3]);
        let cam = Camera::identity(f, f, 5.5, 4.5).unwrap();
        let (normals, mask) = depth_to_normal(&depth, &cam).unwrap();
        for j in 0..10 {
            for i in 0..12 {
                let n = normals.vec3(i, j);
                prop_assert!((n.norm() - 1.0).abs() <= 1e-6);
                if !mask[depth.index(i, j)] {
                    prop_assert!(n.dot(&cam.ray(i as f64, j as f64)) < 0.0);
                }
            }
        }
    }
}

#[test]
fn normal_incidence_closed_form() {
    let n = Vec3::z();
    for &r in &[1.0, 0.5, 0.2] {
        let got = specular_brdf(&n, &n, &n, r);
        assert!(rel_err(got, brdf_ref(1.0, 1.0, 1.0, 1.0, r), 0.0) < 1e-12);
    }
    // D = 1/pi and G = 1 at r = 1, so only Fresnel remains.
    assert!(rel_err(specular_brdf(&n, &n, &n, 1.0), F0 / (4.0 * PI), 0.0) < 1e-12);
}

#[test]
fn off_axis_matches_scalar_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = Vec3::z();
    for _ in 0..200 {
        let v = common::upper_unit(&mut rng);
        let l = common::upper_unit(&mut rng);
        let r = rng.random_range(0.05..1.0);
        let h = (v + l).normalize();
        let want = brdf_ref(v.z, l.z, h.z, v.dot(&h), r);
        assert!(rel_err(specular_brdf(&v, &l, &n, r), want, 1e-300) < 1e-10);
    }
}

#[test]
fn directional_albedo_at_most_one() {
    let n = Vec3::z();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let samples = 100_000;
    for &r in &[0.2, 0.5, 1.0] {
        for &theta in &[0.0, 0.7, 1.3, 1.55] {
            let v = spherical_to_unit(theta, 0.4);
            let mut acc = 0.0;
            for _ in 0..samples {
                let z: f64 = rng.random_range(0.0..1.0);
                let phi: f64 = rng.random_range(0.0..2.0 * PI);
                let s = (1.0 - z * z).sqrt();
                let l = Vec3::new(s * phi.cos(), s * phi.sin(), z);
                acc += specular_brdf(&v, &l, &n, r) * z;
            }
            let albedo = acc * 2.0 * PI / samples as f64;
            assert!(albedo <= 1.0, "r={r} theta={theta}: {albedo}");
        }
    }
}

#[test]
fn rough_specular_matches_monte_carlo() {
    let n = Vec3::z();
    let radiance = Rgb::new(1.5, 0.8, 0.3);
    let env = EnvMapGrid::constant(16, 32, z_frame(), radiance).unwrap();
    let material = MaterialSample::new(Rgb::repeat(0.5), 1.0, n).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let samples = 1_000_000;
    for &theta in &[0.0, 0.6] {
        let v = spherical_to_unit(theta, 0.0);
        // Cosine-weighted hemisphere sampling: the estimator is pi * B_s.
        let mut acc = 0.0;
        for _ in 0..samples {
            let u1: f64 = rng.random_range(0.0..1.0);
            let phi: f64 = rng.random_range(0.0..2.0 * PI);
            let s = u1.sqrt();
            let l = Vec3::new(s * phi.cos(), s * phi.sin(), (1.0 - u1).sqrt());
            acc += specular_brdf(&v, &l, &n, 1.0) * PI;
        }
        let reference = acc / samples as f64;
        let got = render_specular(&material, &env, &v);
        for c in 0..3 {
            let e = rel_err(got[c], reference * radiance[c], 0.0);
            assert!(e < 0.03, "theta={theta} channel {c}: {e}");
        }
    }
}

#[test]
fn sharp_specular_peaks_at_mirror_direction() {
    let frame = z_frame();
    let mut env = EnvMapGrid::black(16, 32, frame).unwrap();
    let (br, bc) = (5, 7);
    let radiance = 10.0;
    env.set(br, bc, Rgb::repeat(radiance));
    let material = MaterialSample::new(Rgb::repeat(0.5), 0.05, Vec3::z()).unwrap();

    let mirror_of = |d: Vec3| 2.0 * d.z * Vec3::z() - d;
    let mut best = (0, 0, f64::MIN);
    for row in 0..16 {
        for col in 0..32 {
            let v = mirror_of(env.texel_direction(row, col));
            let value = render_specular(&material, &env, &v).x;
            if value > best.2 {
                best = (row, col, value);
            }
        }
    }
    let dc = (best.1 as i64 - bc as i64).rem_euclid(32).min((bc as i64 - best.1 as i64).rem_euclid(32));
    assert!((best.0 as i64 - br as i64).abs() <= 1 && dc <= 1);

    let l = env.texel_direction(br, bc);
    let v = mirror_of(l);
    let peak = radiance * brdf_ref(v.z, l.z, 1.0, v.z, 0.05) * l.z * env.texel_solid_angle(br);
    assert!(rel_err(best.2, peak, 0.0) < 1e-9);
}

#[test]
fn sg_specular_tracks_quadrature_for_flat_lobe() {
    let frame = z_frame();
    let env = SgEnvironment::new(vec![SgLobe::new(0.3, 1.0, 0.0, Rgb::new(2.0, 1.0, 0.5)).unwrap()]).unwrap();
    let raster = env.rasterize(16, 32, &frame).unwrap();
    let material = MaterialSample::new(Rgb::repeat(0.5), 0.6, Vec3::z()).unwrap();
    for &theta in &[0.0, 0.4, 0.8, 1.1] {
        let v = spherical_to_unit(theta, 0.7);
        let quad = render_specular(&material, &raster, &v);
        let sg = sg_render_specular(&material, &env, &v).unwrap();
        for c in 0..3 {
            assert!(rel_err(sg[c], quad[c], 0.0) < 0.15, "theta={theta}: {} vs {}", sg[c], quad[c]);
        }
    }
}

#[test]
fn aligned_lobe_features() {
    let n = Vec3::z();
    let env = SgEnvironment::new(vec![SgLobe::from_axis(&n, 5.0, Rgb::repeat(1.0)).unwrap()]).unwrap();
    let f = spec_feature_inputs(&env, &n, &n).unwrap()[0];
    assert!((f.ndoth_sq - 1.0).abs() < 1e-15);
    assert!((f.ndotxi - 1.0).abs() < 1e-15);
    assert!((f.ndotv - 1.0).abs() < 1e-15);
    assert!((f.fresnel - F0).abs() < 1e-15);
    assert!(f.mask);
}

#[test]
fn rerender_pixel_is_both_renders() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let env = common::random_env(&mut rng, 3).rasterize(16, 32, &z_frame()).unwrap();
    let material = MaterialSample::new(Rgb::new(0.2, 0.5, 0.9), 0.4, Vec3::z()).unwrap();
    let v = spherical_to_unit(0.5, 2.0);
    let (d, s) = rerender_pixel(&material, &env, &v);
    assert_eq!(d, render_diffuse(&material.albedo, &env));
    assert_eq!(s, render_specular(&material, &env, &v));

    let flat = EnvMapGrid::constant(16, 32, z_frame(), Rgb::repeat(2.0)).unwrap();
    let (d, _) = rerender_pixel(&MaterialSample { albedo: Rgb::repeat(0.5), ..material }, &flat, &v);
    assert!(d.iter().all(|c| (c - 1.0).abs() < 0.01));
}

fn texels(seed: u64, h: usize, w: usize) -> Vec<Rgb> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..h * w).map(|_| common::rgb(&mut rng, 0.0, 3.0)).collect()
}

proptest! {
    #[test]
    fn renders_scale_with_radiance(seed in any::<u64>(), k in -4i32..5, c in 0.01f64..50.0, r in 0.05f64..1.0) {
        let env = EnvMapGrid::from_texels(8, 16, z_frame(), texels(seed, 8, 16)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let v = common::upper_unit(&mut rng);
        let material = MaterialSample::new(Rgb::new(0.3, 0.6, 0.9), r, Vec3::z()).unwrap();
        let sg = common::random_env(&mut rng, 3);
        let sg_scaled = SgEnvironment::with_visibility(
            sg.lobes().iter().map(|l| SgLobe { intensity: l.intensity * 2f64.powi(k), ..*l }).collect(),
            sg.visibility().to_vec(),
        ).unwrap();

        let base_d = render_diffuse(&material.albedo, &env);
        let base_s = render_specular(&material, &env, &v);
        let base_sg = sg_render_specular(&material, &sg, &v).unwrap();
        prop_assert!(base_d.iter().chain(base_s.iter()).chain(base_sg.iter()).all(|x| *x >= 0.0));

        // Powers of two scale every intermediate exactly.
        let p = 2f64.powi(k);
        let env_p = env.scaled(p);
        prop_assert_eq!(render_diffuse(&material.albedo, &env_p), base_d * p);
        prop_assert_eq!(render_specular(&material, &env_p, &v), base_s * p);
        prop_assert_eq!(sg_render_specular(&material, &sg_scaled, &v).unwrap(), base_sg * p);

        let env_c = env.scaled(c);
        let dc = render_diffuse(&material.albedo, &env_c);
        let sc = render_specular(&material, &env_c, &v);
        for i in 0..3 {
            prop_assert!(rel_err(dc[i], base_d[i] * c, 1e-300) <= 1e-12);
            prop_assert!(rel_err(sc[i], base_s[i] * c, 1e-300) <= 1e-12);
        }
    }

    #[test]
    fn diffuse_ignores_rotation_of_symmetric_env(
        rows in prop::collection::vec(0.0f64..5.0, 8),
        angle in -PI..PI,
    ) {
        let n = Vec3::new(0.2, -0.3, 0.9).normalize();
        let base = Frame::from_normal(&n).unwrap();
        let t = base.tangent * angle.cos() + base.bitangent * angle.sin();
        let rotated = Frame::new(n, t, n.cross(&t)).unwrap();
        // Constant rows are rings about the normal.
        let texels: Vec<Rgb> = (0..8 * 16).map(|k| Rgb::new(rows[k / 16], 0.5 * rows[k / 16], 1.0)).collect();
        let a = EnvMapGrid::from_texels(8, 16, base, texels.clone()).unwrap();
        let b = EnvMapGrid::from_texels(8, 16, rotated, texels).unwrap();
        let albedo = Rgb::new(0.4, 0.7, 1.0);
        let (x, y) = (render_diffuse(&albedo, &a), render_diffuse(&albedo, &b));
        for i in 0..3 {
            prop_assert!(rel_err(x[i], y[i], 1e-300) <= 1e-12);
        }
    }

    #[test]
    fn brdf_is_reciprocal(
        tv in 0.0f64..1.55, pv in -PI..PI,
        tl in 0.0f64..1.55, pl in -PI..PI,
        r in 0.01f64..1.0,
    ) {
        let n = Vec3::new(0.1, 0.2, 1.0).normalize();
        let frame = Frame::from_normal(&n).unwrap();
        let v = frame.to_world(&spherical_to_unit(tv, pv));
        let l = frame.to_world(&spherical_to_unit(tl, pl));
        let a = specular_brdf(&v, &l, &n, r);
        let b = specular_brdf(&l, &v, &n, r);
        prop_assert!(rel_err(a, b, 1e-300) <= 1e-12);
    }

    #[test]
    fn feature_mask_follows_sign_rule(seed in any::<u64>(), zero in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut env = common::random_env(&mut rng, 4);
        if zero {
            let mut lobes = env.lobes().to_vec();
            lobes[0].intensity = Rgb::zeros();
            env = SgEnvironment::with_visibility(lobes, env.visibility().to_vec()).unwrap();
        }
        let n = common::unit(&mut rng);
        let v = common::unit(&mut rng);
        let feats = spec_feature_inputs(&env, &n, &v).unwrap();
        for (f, lobe) in feats.iter().zip(env.lobes()) {
            let eta: f64 = f.eta.abs().sum();
            if eta == 0.0 || n.dot(&lobe.axis()) <= 0.0 {
                prop_assert!(!f.mask);
            }
            for d in [f.ndoth_sq, f.ndotxi, f.ndotv] {
                prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&d));
            }
        }
        if zero {
            prop_assert!(!feats[0].mask);
        }
    }
}

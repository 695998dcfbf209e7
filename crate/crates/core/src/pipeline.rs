//! End-to-end demo on a generated scene.
//!
//! Stages, in order: normals from depth, per-tile SG lighting, specular
//! features, multi-view color pooling and albedo, the surface volume, VSG
//! volume fitting, re-rendering and object insertion. Learned networks are
//! replaced by deterministic fits against the scene's ground truth, so the
//! report measures how well each representation can hold that truth.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::{aggregate, FeatureSet, IdentityEncoder};
use crate::brdf::{render_diffuse, render_specular, spec_feature_inputs, MaterialSample};
use crate::envmap::EnvMapGrid;
use crate::error::{invalid, Result, StageContext};
use crate::geometry::{depth_to_normal, reproject, view_weight_maps};
use crate::image::Map;
use crate::insertion::{insert_object, InsertOptions, InsertView, InsertedSphere, Insertion, SphereMaterial};
use crate::io::EnvField;
use crate::math::{Frame, Rgb, Vec3};
use crate::metrics::{stage_losses, MaskedPair, Stage, StageBetas, StageInputs, StageLoss};
use crate::scene::{Scene, SceneSpec};
use crate::sg::SgEnvironment;
use crate::sg_fit::{sg_fit, SgFitOptions};
use crate::surface::{build_surface_volume, SurfaceInputs, SurfaceVolume};
use crate::vsg::{Aabb, VsgVolume};
use crate::vsg_fit::{vsg_fit, VsgFitOptions, VsgTarget};

/// Features per SG lobe in the specular feature map:
/// fresnel, (n.h)^2, n.xi, n.v, lambda, mask, eta_rgb.
pub const SPEC_FEATURES_PER_LOBE: usize = 9;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct DemoConfig {
    /// Drives every random choice in the pipeline.
    pub seed: u64,
    pub sg_lobes: usize,
    /// Side of the square pixel clusters that share one SG fit.
    pub tile: usize,
    pub sg: SgFitOptions,
    pub vsg_dims: [usize; 3],
    /// Number of target pixels whose environment maps supervise the volume.
    pub vsg_points: usize,
    pub vsg: VsgFitOptions,
    pub surface_dims: [usize; 3],
    /// Volume bounds grow by this fraction of the scene extent on each side.
    pub bounds_padding: f64,
    /// Samples per ray when reading lighting back out of the volume.
    pub extract_samples: usize,
    /// `None` places a diffuse sphere in front of the target view.
    pub sphere: Option<InsertedSphere>,
    pub insert: InsertOptions,
    pub betas: StageBetas,
}

impl Default for DemoConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            sg_lobes: 3,
            tile: 4,
            sg: SgFitOptions::default(),
            vsg_dims: [8, 8, 8],
            vsg_points: 48,
            vsg: VsgFitOptions::default(),
            surface_dims: [16, 16, 16],
            bounds_padding: 0.05,
            extract_samples: 64,
            sphere: None,
            insert: InsertOptions::default(),
            betas: StageBetas::default(),
        }
    }
}

/// Everything a demo run reads from its config file.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub scene: SceneSpec,
    pub demo: DemoConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgStats {
    pub tiles: usize,
    pub mean_iterations: f64,
    pub max_objective: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VsgStats {
    pub iterations: usize,
    pub final_objective: f64,
    pub lighting_error: f64,
    pub entropy: f64,
    pub mean_min_alpha: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemoReport {
    pub seed: u64,
    /// Mean angular normal error (rad) against ground truth.
    pub normal_g1: f64,
    /// Mean per-pixel g4 between ground-truth and tile SG lighting.
    pub lighting_g4: f64,
    /// Mean per-pixel g4 between ground-truth and volume lighting.
    pub volume_lighting_g4: f64,
    /// si-MSE of the estimated albedo against ground truth.
    pub albedo_g3: f64,
    /// si-MSE of the re-rendered target image against the input.
    pub rerender_g3: f64,
    pub sg: SgStats,
    pub vsg: VsgStats,
    pub stage_losses: BTreeMap<String, StageLoss>,
    pub inserted_pixels: usize,
    /// Wall-clock seconds per stage; excluded from reproducibility checks.
    pub timings: BTreeMap<String, f64>,
}

impl DemoReport {
    /// The report with timings cleared, for run-to-run comparison.
    pub fn without_timings(&self) -> DemoReport {
        DemoReport {
            timings: BTreeMap::new(),
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug)]
pub struct DemoOutput {
    pub report: DemoReport,
    pub normal: Map,
    /// Tile SG environments in row-major tile order.
    pub sg_envs: Vec<SgEnvironment>,
    pub sg_env: EnvField,
    pub spec_features: Map,
    pub pooled_color: Map,
    pub albedo: Map,
    pub surface: SurfaceVolume,
    pub volume: VsgVolume,
    pub volume_env: EnvField,
    pub rerender: Map,
    pub insertion: Insertion,
}

struct Timer {
    start: Instant,
    timings: BTreeMap<String, f64>,
}

impl Timer {
    fn new() -> Self {
        Self {
            start: Instant::now(),
            timings: BTreeMap::new(),
        }
    }

    fn lap(&mut self, stage: &str) {
        let now = Instant::now();
        self.timings
            .insert(stage.to_string(), (now - self.start).as_secs_f64());
        self.start = now;
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len().max(1) as f64
}

/// Axis-aligned box around the target view's surface points and the light.
pub fn scene_bounds(scene: &Scene, padding: f64) -> Result<Aabb> {
    let view = scene.bundle.target();
    let (w, h) = (scene.bundle.width(), scene.bundle.height());
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    let mut grow = |p: Vec3| {
        lo = lo.inf(&p);
        hi = hi.sup(&p);
    };
    for y in 0..h {
        for x in 0..w {
            grow(view.camera.backproject(x as f64, y as f64, view.depth.get(x, y, 0)));
        }
    }
    let light = &scene.spec.light;
    let (c, e) = (Vec3::from(light.center), Vec3::from(light.half_extent));
    grow(c - e);
    grow(c + e);
    let pad = (hi - lo).max() * padding.max(0.0);
    // Flat scenes still need a positive extent on every axis.
    let pad = Vec3::repeat(pad.max(1e-3));
    Aabb::new(lo - pad, hi + pad)
}

/// The sphere used when the config leaves it unset: on the central camera
/// ray, a fifth of the way from the surface back to the camera.
fn default_sphere(scene: &Scene) -> Result<InsertedSphere> {
    let view = scene.bundle.target();
    let cam = &view.camera;
    let (x, y) = (scene.bundle.width() / 2, scene.bundle.height() / 2);
    let depth = view.depth.get(x, y, 0);
    let anchor = cam.backproject(x as f64, y as f64, depth * 0.8);
    InsertedSphere::new(
        anchor,
        0.08 * depth,
        SphereMaterial::Diffuse {
            albedo: Rgb::new(0.8, 0.8, 0.8),
            roughness: Some(0.3),
        },
    )
}

fn world_frame(scene: &Scene, normal_cam: &Vec3) -> Result<Frame> {
    Frame::from_normal(&(scene.bundle.target().camera.rotation * normal_cam))
}

pub fn pipeline_demo(scene: &Scene, config: &DemoConfig) -> Result<DemoOutput> {
    scene.bundle.validate()?;
    if config.tile == 0 || config.sg_lobes == 0 || config.vsg_points == 0 || config.extract_samples == 0 {
        return invalid("tile, sg_lobes, vsg_points and extract_samples must be positive");
    }
    let mut timer = Timer::new();
    let bundle = &scene.bundle;
    let ti = bundle.target_index;
    let view = bundle.target();
    let truth = &scene.truth[ti];
    let cam = &view.camera;
    let (w, h) = (bundle.width(), bundle.height());
    let (eh, ew) = (truth.env.env_height, truth.env.env_width);
    let ones = Map::filled(w, h, 1, 1.0);
    let pixels: Vec<(usize, usize)> = (0..h).flat_map(|y| (0..w).map(move |x| (x, y))).collect();

    // Normals.
    let (normal, _) = depth_to_normal(&view.depth, cam).stage("normal")?;
    let normal_g1 = MaskedPair::from_maps(&truth.normal, &normal, None)
        .stage("normal")?
        .l1_angular()
        .value;
    let frames: Vec<Frame> = pixels
        .iter()
        .map(|&(x, y)| world_frame(scene, &normal.vec3(x, y)))
        .collect::<Result<_>>()
        .stage("normal")?;
    timer.lap("normal");

    // Per-tile SG lighting, fitted to the tile's mean ground-truth map.
    let (tw, th) = (w.div_ceil(config.tile), h.div_ceil(config.tile));
    let tile_pixels = |t: usize| {
        let (tx, ty) = (t % tw, t / tw);
        let xs = tx * config.tile..((tx + 1) * config.tile).min(w);
        let ys = ty * config.tile..((ty + 1) * config.tile).min(h);
        ys.flat_map(move |y| xs.clone().map(move |x| (x, y)))
    };
    let fits = (0..tw * th)
        .into_par_iter()
        .map(|t| {
            let members: Vec<_> = tile_pixels(t).collect();
            let mut texels = vec![Rgb::zeros(); eh * ew];
            for &(x, y) in &members {
                for (acc, v) in texels.iter_mut().zip(truth.env.texels(x, y)) {
                    *acc += v;
                }
            }
            let n = members.len() as f64;
            let target = EnvMapGrid::from_texels(
                eh,
                ew,
                Frame::default(),
                texels.into_iter().map(|t| t / n).collect(),
            )?;
            sg_fit(&target, config.sg_lobes, &config.sg)
        })
        .collect::<Result<Vec<_>>>()
        .stage("sg_fit")?;
    let sg_stats = SgStats {
        tiles: fits.len(),
        mean_iterations: mean(&fits.iter().map(|f| f.report.iterations as f64).collect::<Vec<_>>()),
        max_objective: fits.iter().map(|f| f.report.final_objective).fold(0.0, f64::max),
    };
    let tile_maps: Vec<EnvMapGrid> = fits
        .iter()
        .map(|f| f.env.rasterize(eh, ew, &Frame::default()))
        .collect::<Result<_>>()
        .stage("sg_fit")?;
    let tile_of = |x: usize, y: usize| (y / config.tile) * tw + x / config.tile;
    let mut sg_env = EnvField::new(w, h, eh, ew);
    for &(x, y) in &pixels {
        sg_env.set_texels(x, y, tile_maps[tile_of(x, y)].texels());
    }
    let lighting_g4 = mean(
        &pixels
            .par_iter()
            .map(|&(x, y)| {
                let gt: Vec<f64> = truth.env.texels(x, y).iter().flat_map(|t| t.iter().copied()).collect();
                crate::metrics::si_log_mse(&gt, &tile_maps[tile_of(x, y)].flat(), None, 3).map(|s| s.value)
            })
            .collect::<Result<Vec<_>>>()
            .stage("sg_fit")?,
    );
    let sg_envs: Vec<SgEnvironment> = fits.into_iter().map(|f| f.env).collect();
    timer.lap("sg_fit");

    // Specular features against each pixel's tile lighting, in the world frame.
    let mut spec_features = Map::new(w, h, config.sg_lobes * SPEC_FEATURES_PER_LOBE);
    for (p, &(x, y)) in pixels.iter().enumerate() {
        let n_world = frames[p].normal;
        let point = cam.backproject(x as f64, y as f64, view.depth.get(x, y, 0));
        let v = (cam.center() - point).normalize();
        // Tile lobes are expressed in the default frame; move them to world.
        let env = &sg_envs[tile_of(x, y)];
        let lobes = env
            .lobes()
            .iter()
            .map(|l| crate::sg::SgLobe::from_axis(&frames[p].to_world(&l.axis()), l.sharpness, l.intensity))
            .collect::<Result<Vec<_>>>()
            .stage("spec_features")?;
        let world_env = SgEnvironment::new(lobes).stage("spec_features")?;
        let feats = spec_feature_inputs(&world_env, &n_world, &v).stage("spec_features")?;
        let out = &mut spec_features.data[p * spec_features.channels..(p + 1) * spec_features.channels];
        for (chunk, f) in out.chunks_exact_mut(SPEC_FEATURES_PER_LOBE).zip(&feats) {
            chunk.copy_from_slice(&[
                f.fresnel,
                f.ndoth_sq,
                f.ndotxi,
                f.ndotv,
                f.lambda,
                if f.mask { 1.0 } else { 0.0 },
                f.eta.x,
                f.eta.y,
                f.eta.z,
            ]);
        }
    }
    timer.lap("spec_features");

    // Multi-view pooling: per-view colors at the reprojected target pixel,
    // weighted by projection error; albedo divides out the tile shading.
    let weights = view_weight_maps(bundle).stage("aggregation")?;
    let k = bundle.views.len();
    let pooled: Vec<(Rgb, Vec<Rgb>)> = pixels
        .par_iter()
        .map(|&(x, y)| -> Result<(Rgb, Vec<Rgb>)> {
            let own = view.image.rgb(x, y);
            let mut colors = Vec::with_capacity(k);
            for other in &bundle.views {
                let r = reproject(x as f64, y as f64, view.depth.get(x, y, 0), cam, &other.camera, &other.depth)?;
                let mut c = [0.0; 3];
                let ok = r.valid() && other.image.bilinear_into(r.u, r.v, &mut c);
                colors.push(if ok { Rgb::from(c) } else { own });
            }
            let inputs = colors.iter().map(|c| c.as_slice().to_vec()).collect();
            let wv = weights.iter().map(|m| m.get(x, y, 0)).collect();
            let fs = FeatureSet::new(inputs, wv, ti)?;
            let pooled_mean = |v: &[f64]| v[3..6].to_vec();
            let m = aggregate(&fs, &IdentityEncoder, &pooled_mean)?;
            Ok((Rgb::new(m[0], m[1], m[2]), colors))
        })
        .collect::<Result<_>>()
        .stage("aggregation")?;
    let mut pooled_color = Map::new(w, h, 3);
    let mut albedo = Map::new(w, h, 3);
    let mut warped: Vec<Map> = (0..k).map(|_| Map::new(w, h, 3)).collect();
    for (p, &(x, y)) in pixels.iter().enumerate() {
        let (c, colors) = &pooled[p];
        pooled_color.set_vec3(x, y, c);
        for (m, col) in warped.iter_mut().zip(colors) {
            m.set_vec3(x, y, col);
        }
        let shading = render_diffuse(&Rgb::repeat(1.0), &tile_maps[tile_of(x, y)]);
        let a = Rgb::from_fn(|i, _| if shading[i] > 0.0 { (c[i] / shading[i]).clamp(0.0, 1.0) } else { 0.0 });
        albedo.set_vec3(x, y, &a);
    }
    let albedo_g3 = MaskedPair::from_maps(&truth.albedo, &albedo, None)
        .stage("aggregation")?
        .si_mse()
        .0
        .value;
    timer.lap("aggregation");

    // Surface volume.
    let bounds = scene_bounds(scene, config.bounds_padding).stage("surface_volume")?;
    let roughness = Map::filled(w, h, 1, 1.0);
    let surface = build_surface_volume(
        &SurfaceInputs {
            image: &view.image,
            normal: &normal,
            albedo: &albedo,
            roughness: &roughness,
            depth: &view.depth,
            confidence: &view.confidence,
        },
        cam,
        config.surface_dims,
        bounds,
    )
    .stage("surface_volume")?;
    timer.lap("surface_volume");

    // VSG volume fitted to ground-truth lighting at a seeded pixel subset.
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut chosen = sample(&mut rng, pixels.len(), config.vsg_points.min(pixels.len())).into_vec();
    chosen.sort_unstable();
    let targets = chosen
        .iter()
        .map(|&p| {
            let (x, y) = pixels[p];
            Ok(VsgTarget {
                point: cam.backproject(x as f64, y as f64, view.depth.get(x, y, 0)),
                env: EnvMapGrid::from_texels(eh, ew, frames[p], truth.env.texels(x, y))?,
            })
        })
        .collect::<Result<Vec<_>>>()
        .stage("vsg_fit")?;
    let fit = vsg_fit(&targets, config.vsg_dims, bounds, &config.vsg).stage("vsg_fit")?;
    let volume = fit.volume;
    let alphas: Vec<f64> = volume.voxels().iter().map(|v| v.alpha).collect();
    let vsg_stats = VsgStats {
        iterations: fit.report.iterations,
        final_objective: fit.report.final_objective,
        lighting_error: fit.lighting_error,
        entropy: fit.entropy,
        mean_min_alpha: mean(&alphas.iter().map(|a| a.min(1.0 - a)).collect::<Vec<_>>()),
    };
    timer.lap("vsg_fit");

    // Re-render every target pixel under the volume's lighting.
    let rendered: Vec<(EnvMapGrid, Rgb, Vec<Rgb>)> = pixels
        .par_iter()
        .enumerate()
        .map(|(p, &(x, y))| -> Result<(EnvMapGrid, Rgb, Vec<Rgb>)> {
            let point = cam.backproject(x as f64, y as f64, view.depth.get(x, y, 0));
            let env = volume.extract_env_map(&point, &frames[p], eh, ew, config.extract_samples)?;
            let a = albedo.rgb(x, y);
            let diffuse = render_diffuse(&a, &env);
            let material = MaterialSample::new(a, 1.0, frames[p].normal)?;
            let specular = bundle
                .views
                .iter()
                .map(|other| {
                    let v = (other.camera.center() - point).normalize();
                    render_specular(&material, &env, &v)
                })
                .collect();
            Ok((env, diffuse, specular))
        })
        .collect::<Result<_>>()
        .stage("rerender")?;
    let mut volume_env = EnvField::new(w, h, eh, ew);
    let mut rerender = Map::new(w, h, 3);
    let mut specular: Vec<Map> = (0..k).map(|_| Map::new(w, h, 3)).collect();
    for (p, &(x, y)) in pixels.iter().enumerate() {
        let (env, diffuse, spec) = &rendered[p];
        volume_env.set_texels(x, y, env.texels());
        rerender.set_vec3(x, y, diffuse);
        for (m, s) in specular.iter_mut().zip(spec) {
            m.set_vec3(x, y, s);
        }
    }
    let rerender_g3 = MaskedPair::from_maps(&view.image, &rerender, None)
        .stage("rerender")?
        .si_mse()
        .0
        .value;
    let c = truth.env.map.channels;
    let volume_lighting_g4 = mean(
        &(0..w * h)
            .map(|p| {
                let (a, b) = (&truth.env.map.data[p * c..(p + 1) * c], &volume_env.map.data[p * c..(p + 1) * c]);
                crate::metrics::si_log_mse(a, b, None, 3).map(|s| s.value)
            })
            .collect::<Result<Vec<_>>>()
            .stage("rerender")?,
    );
    timer.lap("rerender");

    // Stage losses against the generated ground truth.
    let visibility: Vec<f64> = sg_envs.iter().flat_map(|e| e.visibility().iter().copied()).collect();
    let inputs = StageInputs {
        normal_gt: Some(truth.normal.clone()),
        normal_pred: Some(normal.clone()),
        mask_l: Some(ones.clone()),
        mask_o: Some(ones.clone()),
        env_dl_gt: Some(truth.env.map.clone()),
        env_dl_pred: Some(sg_env.map.clone()),
        visibility: Some(visibility),
        alpha_dl: Some(alphas.clone()),
        albedo_gt: Some(truth.albedo.clone()),
        albedo_pred: Some(albedo.clone()),
        roughness_gt: Some(truth.roughness.clone()),
        roughness_pred: Some(roughness.clone()),
        env_svl_gt: Some(truth.env.map.clone()),
        env_svl_pred: Some(volume_env.map.clone()),
        alpha_svl: Some(alphas),
        images: Some(warped),
        diffuse_render: Some(rerender.clone()),
        specular_renders: Some(specular),
        view_weights: Some(weights),
        target_index: ti,
    };
    let mut losses = stage_losses(
        &inputs,
        &config.betas,
        &[Stage::Normal, Stage::InDl, Stage::Brdf, Stage::Svl],
    )
    .stage("stage_losses")?;
    // The ex-situ lighting shares the volume with the refined lighting here.
    let mut ex = inputs.clone();
    ex.env_dl_pred = Some(volume_env.map.clone());
    losses.extend(stage_losses(&ex, &config.betas, &[Stage::ExDl]).stage("stage_losses")?);
    timer.lap("stage_losses");

    // Object insertion.
    let sphere = match config.sphere {
        Some(s) => s,
        None => default_sphere(scene).stage("insertion")?,
    };
    let insertion = insert_object(
        &InsertView {
            image: &view.image,
            depth: &view.depth,
            camera: cam,
        },
        &volume,
        &sphere,
        &config.insert,
    )
    .stage("insertion")?;
    timer.lap("insertion");

    let report = DemoReport {
        seed: config.seed,
        normal_g1,
        lighting_g4,
        volume_lighting_g4,
        albedo_g3,
        rerender_g3,
        sg: sg_stats,
        vsg: vsg_stats,
        stage_losses: losses,
        inserted_pixels: insertion.coverage.iter().filter(|c| **c).count(),
        timings: timer.timings,
    };
    Ok(DemoOutput {
        report,
        normal,
        sg_envs,
        sg_env,
        spec_features,
        pooled_color,
        albedo,
        surface,
        volume,
        volume_env,
        rerender,
        insertion,
    })
}

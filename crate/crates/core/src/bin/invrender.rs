use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::json;

use invrender::brdf::render_diffuse;
use invrender::envmap::EnvMapGrid;
use invrender::error::{Error, Result};
use invrender::image::Map;
use invrender::insertion::{insert_object, InsertOptions, InsertView, InsertedSphere, SphereMaterial};
use invrender::io;
use invrender::metrics::MaskedPair;
use invrender::pipeline::{pipeline_demo, scene_bounds, RunConfig};
use invrender::scene::generate_scene;
use invrender::sg_fit::{sg_fit, SgFitOptions};
use invrender::vsg_fit::{vsg_fit, VsgFitOptions, VsgTarget};
use invrender::{Frame, Rgb, Vec3};

#[derive(Parser)]
#[command(name = "invrender", version, about = "Lighting fits, re-rendering and object insertion on analytic scenes")]
struct Cli {
    /// Worker threads (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render an analytic scene and its ground truth into a directory.
    GenScene {
        /// JSON or TOML run config; defaults apply to missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit SG lobes to an environment map stored as an RGB PFM.
    FitSg {
        #[arg(long)]
        env: PathBuf,
        #[arg(long, default_value_t = 3)]
        lobes: usize,
        #[arg(long, default_value_t = 2000)]
        max_iters: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a VSG volume to ground-truth lighting at random target pixels.
    FitVsg {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, value_parser = parse_dims, default_value = "8,8,8")]
        dims: [usize; 3],
        #[arg(long, default_value_t = 48)]
        points: usize,
        #[arg(long, default_value_t = 1000)]
        max_iters: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rasterize an SG environment or extract one from a volume.
    RenderEnv {
        #[arg(long, conflicts_with = "volume", required_unless_present = "volume")]
        sg: Option<PathBuf>,
        #[arg(long)]
        volume: Option<PathBuf>,
        /// Query point (volume only).
        #[arg(long, value_parser = parse_vec3, default_value = "0,0,0")]
        point: Vec3,
        /// Hemisphere normal.
        #[arg(long, value_parser = parse_vec3, default_value = "0,0,1")]
        normal: Vec3,
        #[arg(long, default_value_t = 16)]
        height: usize,
        #[arg(long, default_value_t = 32)]
        width: usize,
        #[arg(long, default_value_t = 64)]
        samples: usize,
        #[arg(long, default_value_t = 0.0)]
        exposure: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-render the target view's diffuse image under a volume's lighting.
    Rerender {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        volume: PathBuf,
        /// Albedo PFM; defaults to the scene's ground truth.
        #[arg(long)]
        albedo: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        samples: usize,
        #[arg(long, default_value_t = 0.0)]
        exposure: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Insert a sphere into the target view.
    Insert {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        volume: PathBuf,
        #[arg(long, value_parser = parse_vec3)]
        center: Vec3,
        #[arg(long)]
        radius: f64,
        /// `mirror` or `diffuse:r,g,b[:roughness]`.
        #[arg(long, value_parser = parse_material, default_value = "mirror")]
        material: SphereMaterial,
        #[arg(long, default_value_t = 0.0)]
        exposure: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare two PFM images.
    Metrics {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = MetricKind::All)]
        metric: MetricKind,
    },
    /// Generate a scene, run every stage and write the report and maps.
    Demo {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MetricKind {
    G1,
    G2,
    G3,
    G4,
    All,
}

fn parse_floats<const N: usize>(s: &str) -> std::result::Result<[f64; N], String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    parts
        .try_into()
        .map_err(|_| format!("expected {N} comma-separated numbers, got `{s}`"))
}

fn parse_vec3(s: &str) -> std::result::Result<Vec3, String> {
    parse_floats::<3>(s).map(Vec3::from)
}

fn parse_dims(s: &str) -> std::result::Result<[usize; 3], String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    parts
        .try_into()
        .map_err(|_| format!("expected X,Y,Z voxel counts, got `{s}`"))
}

fn parse_material(s: &str) -> std::result::Result<SphereMaterial, String> {
    let mut parts = s.split(':');
    match parts.next() {
        Some("mirror") if parts.next().is_none() => Ok(SphereMaterial::Mirror),
        Some("diffuse") => {
            let albedo = Rgb::from(parse_floats::<3>(parts.next().unwrap_or("0.8,0.8,0.8"))?);
            let roughness = parts
                .next()
                .map(|r| r.trim().parse::<f64>().map_err(|e| format!("roughness `{r}`: {e}")))
                .transpose()?;
            if parts.next().is_some() {
                return Err(format!("too many fields in material `{s}`"));
            }
            Ok(SphereMaterial::Diffuse { albedo, roughness })
        }
        _ => Err(format!("material must be `mirror` or `diffuse:r,g,b[:roughness]`, got `{s}`")),
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    path.map_or_else(|| Ok(RunConfig::default()), io::read_config)
}

/// PNG for `.png` paths, PFM otherwise.
fn write_image(path: &Path, map: &Map, exposure: f64) -> Result<()> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
        io::write_png(path, map, exposure)
    } else {
        io::write_pfm(path, map)
    }
}

fn env_image(env: &EnvMapGrid) -> Map {
    Map::from_fn(env.width(), env.height(), 3, |x, y, c| env.get(y, x)[c])
}

fn print_json(value: &serde_json::Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenScene { config, out } => {
            let cfg = load_config(config.as_deref())?;
            let scene = generate_scene(&cfg.scene)?;
            io::write_scene(&out, &scene)?;
            eprintln!("wrote {} views to {}", scene.bundle.views.len(), out.display());
        }
        Command::FitSg {
            env,
            lobes,
            max_iters,
            out,
        } => {
            let img = io::read_pfm(&env)?;
            if img.channels != 3 {
                return Err(Error::InvalidArgument("environment map must be RGB".into()));
            }
            let texels = (0..img.height)
                .flat_map(|y| (0..img.width).map(move |x| (x, y)))
                .map(|(x, y)| img.rgb(x, y))
                .collect();
            let target = EnvMapGrid::from_texels(img.height, img.width, Frame::default(), texels)?;
            let fit = sg_fit(
                &target,
                lobes,
                &SgFitOptions {
                    max_iters,
                    ..Default::default()
                },
            )?;
            io::write_sg_env(&out, &fit.env)?;
            let fitted = fit.env.rasterize(img.height, img.width, &Frame::default())?;
            let g4 = invrender::metrics::si_log_mse(&target.flat(), &fitted.flat(), None, 3)?;
            print_json(&json!({
                "g4": g4.value,
                "iterations": fit.report.iterations,
                "objective": fit.report.final_objective,
                "stop_reason": fit.report.stop_reason,
            }))?;
        }
        Command::FitVsg {
            scene,
            dims,
            points,
            max_iters,
            seed,
            out,
        } => {
            let scene = io::read_scene(&scene)?;
            let view = scene.bundle.target();
            let truth = &scene.truth[scene.bundle.target_index];
            let cam = &view.camera;
            let (w, h) = (scene.bundle.width(), scene.bundle.height());
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut chosen = sample(&mut rng, w * h, points.clamp(1, w * h)).into_vec();
            chosen.sort_unstable();
            let targets = chosen
                .iter()
                .map(|&p| {
                    let (x, y) = (p % w, p / w);
                    let depth = view.depth.get(x, y, 0);
                    Ok(VsgTarget {
                        point: cam.backproject(x as f64, y as f64, depth),
                        env: truth.env_map(cam, x, y)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let bounds = scene_bounds(&scene, 0.05)?;
            let opts = VsgFitOptions {
                max_iters,
                ..Default::default()
            };
            let fit = vsg_fit(&targets, dims, bounds, &opts)?;
            io::write_volume(&out, &fit.volume)?;
            print_json(&json!({
                "lighting_error": fit.lighting_error,
                "entropy": fit.entropy,
                "iterations": fit.report.iterations,
                "objective": fit.report.final_objective,
                "stop_reason": fit.report.stop_reason,
            }))?;
        }
        Command::RenderEnv {
            sg,
            volume,
            point,
            normal,
            height,
            width,
            samples,
            exposure,
            out,
        } => {
            let frame = Frame::from_normal(&normal)?;
            let env = match (sg, volume) {
                (Some(sg), _) => io::read_sg_env(&sg)?.rasterize(height, width, &frame)?,
                (None, Some(vol)) => io::read_volume(&vol)?.extract_env_map(&point, &frame, height, width, samples)?,
                (None, None) => unreachable!("clap requires --sg or --volume"),
            };
            write_image(&out, &env_image(&env), exposure)?;
        }
        Command::Rerender {
            scene,
            volume,
            albedo,
            samples,
            exposure,
            out,
        } => {
            let scene = io::read_scene(&scene)?;
            let volume = io::read_volume(&volume)?;
            let view = scene.bundle.target();
            let truth = &scene.truth[scene.bundle.target_index];
            let albedo = match albedo {
                Some(p) => io::read_pfm(p)?,
                None => truth.albedo.clone(),
            };
            let (w, h) = (scene.bundle.width(), scene.bundle.height());
            let (eh, ew) = (truth.env.env_height, truth.env.env_width);
            let cam = &view.camera;
            let colors = (0..w * h)
                .into_par_iter()
                .map(|p| {
                    let (x, y) = (p % w, p / w);
                    let point = cam.backproject(x as f64, y as f64, view.depth.get(x, y, 0));
                    let frame = Frame::from_normal(&(cam.rotation * truth.normal.vec3(x, y)))?;
                    let env = volume.extract_env_map(&point, &frame, eh, ew, samples)?;
                    Ok(render_diffuse(&albedo.rgb(x, y), &env))
                })
                .collect::<Result<Vec<Rgb>>>()?;
            let img = Map::from_fn(w, h, 3, |x, y, c| colors[y * w + x][c]);
            write_image(&out, &img, exposure)?;
            let g3 = MaskedPair::from_maps(&view.image, &img, None)?.si_mse().0;
            print_json(&json!({ "g3": g3.value }))?;
        }
        Command::Insert {
            scene,
            volume,
            center,
            radius,
            material,
            exposure,
            out,
        } => {
            let scene = io::read_scene(&scene)?;
            let volume = io::read_volume(&volume)?;
            let view = scene.bundle.target();
            let sphere = InsertedSphere::new(center, radius, material)?;
            let result = insert_object(
                &InsertView {
                    image: &view.image,
                    depth: &view.depth,
                    camera: &view.camera,
                },
                &volume,
                &sphere,
                &InsertOptions::default(),
            )?;
            write_image(&out, &result.image, exposure)?;
            print_json(&json!({
                "sphere_pixels": result.coverage.iter().filter(|c| **c).count(),
                "min_shadow_ratio": result.shadow.data.iter().copied().fold(1.0, f64::min),
            }))?;
        }
        Command::Metrics { a, b, mask, metric } => {
            let a = io::read_pfm(a)?;
            let b = io::read_pfm(b)?;
            if metric == MetricKind::G1 && a.channels != 3 {
                return Err(Error::InvalidArgument("g1 needs 3-channel normal maps".into()));
            }
            let mask = mask.map(io::read_pfm).transpose()?;
            let pair = MaskedPair::from_maps(&a, &b, mask.as_ref())?;
            let mut report = serde_json::Map::new();
            let wants = |m: MetricKind| metric == m || metric == MetricKind::All;
            if wants(MetricKind::G1) && a.channels == 3 {
                report.insert("g1".into(), json!(pair.l1_angular().value));
            }
            if wants(MetricKind::G2) {
                report.insert("g2".into(), json!(pair.mse().value));
            }
            if wants(MetricKind::G3) {
                let (s, fit) = pair.si_mse();
                report.insert("g3".into(), json!(s.value));
                report.insert("tau".into(), json!(fit.tau));
            }
            if wants(MetricKind::G4) {
                report.insert("g4".into(), json!(pair.si_log_mse().0.value));
            }
            print_json(&serde_json::Value::Object(report))?;
        }
        Command::Demo { config, seed, out } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.demo.seed = s;
            }
            let scene = generate_scene(&cfg.scene)?;
            let result = pipeline_demo(&scene, &cfg.demo)?;
            std::fs::create_dir_all(&out)?;
            io::write_json(out.join("config.json"), &cfg)?;
            io::write_json(out.join("report.json"), &result.report)?;
            io::write_pfm(out.join("normal.pfm"), &result.normal)?;
            io::write_pfm(out.join("albedo.pfm"), &result.albedo)?;
            io::write_pfm(out.join("pooled_color.pfm"), &result.pooled_color)?;
            io::write_pfm(out.join("rerender.pfm"), &result.rerender)?;
            io::write_env_pfm(out.join("sg_env.pfm"), &result.sg_env)?;
            io::write_env_pfm(out.join("volume_env.pfm"), &result.volume_env)?;
            io::write_volume(out.join("volume.json"), &result.volume)?;
            io::write_surface_volume(out.join("surface.json"), &result.surface)?;
            io::write_pfm(out.join("inserted.pfm"), &result.insertion.image)?;
            io::write_png(out.join("inserted.png"), &result.insertion.image, 1.0)?;
            io::write_png(out.join("input.png"), &scene.bundle.target().image, 1.0)?;
            let r = &result.report;
            print_json(&json!({
                "normal_g1": r.normal_g1,
                "lighting_g4": r.lighting_g4,
                "rerender_g3": r.rerender_g3,
                "out": out.display().to_string(),
            }))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

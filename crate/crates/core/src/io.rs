//! File formats: PFM and PNG images, tiled per-pixel environment maps, JSON
//! for cameras and SG environments, and volumes as a JSON header plus a raw
//! little-endian `f32` sidecar.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::{Camera, View, ViewBundle};
use crate::image::Map;
use crate::math::{Rgb, Vec3};
use crate::scene::{Scene, SceneSpec, ViewTruth};
use crate::sg::{SgEnvironment, SgLobe};
use crate::surface::{SurfaceVolume, SURFACE_CHANNELS};
use crate::vsg::{Aabb, Voxel, VsgVolume, VOXEL_CHANNELS};

fn format_err<T>(what: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(Error::Format {
        what,
        detail: detail.into(),
    })
}

// ---------------------------------------------------------------------------
// PFM
// ---------------------------------------------------------------------------

/// Writes a 1- or 3-channel map as little-endian PFM (rows bottom to top).
pub fn write_pfm(path: impl AsRef<Path>, map: &Map) -> Result<()> {
    let tag = match map.channels {
        1 => "Pf",
        3 => "PF",
        c => return invalid(format!("PFM stores 1 or 3 channels, not {c}")),
    };
    let mut buf = format!("{tag}\n{} {}\n-1.0\n", map.width, map.height).into_bytes();
    buf.reserve(map.data.len() * 4);
    let row = map.width * map.channels;
    for y in (0..map.height).rev() {
        for v in &map.data[y * row..(y + 1) * row] {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

fn header_token(r: &mut impl BufRead) -> Result<String> {
    let mut tok = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            break;
        }
        if byte[0].is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            break;
        }
        tok.push(byte[0]);
    }
    if tok.is_empty() {
        return format_err("PFM", "truncated header");
    }
    String::from_utf8(tok).or_else(|_| format_err("PFM", "non-ASCII header"))
}

pub fn read_pfm(path: impl AsRef<Path>) -> Result<Map> {
    let mut r = BufReader::new(fs::File::open(path)?);
    let channels = match header_token(&mut r)?.as_str() {
        "PF" => 3,
        "Pf" => 1,
        t => return format_err("PFM", format!("unknown magic {t:?}")),
    };
    let parse = |s: String, what: &str| -> Result<f64> {
        s.parse::<f64>().or_else(|_| format_err("PFM", format!("bad {what} {s:?}")))
    };
    let width = parse(header_token(&mut r)?, "width")?;
    let height = parse(header_token(&mut r)?, "height")?;
    let scale = parse(header_token(&mut r)?, "scale")?;
    if !(width >= 1.0 && height >= 1.0 && width.fract() == 0.0 && height.fract() == 0.0) || scale == 0.0 {
        return format_err("PFM", "invalid dimensions or scale");
    }
    let (width, height) = (width as usize, height as usize);
    let little = scale < 0.0;
    let mut raw = Vec::new();
    r.read_to_end(&mut raw)?;
    let n = width * height * channels;
    if raw.len() < n * 4 {
        return format_err("PFM", format!("expected {} data bytes, found {}", n * 4, raw.len()));
    }
    let row = width * channels;
    let mut data = vec![0.0; n];
    for (k, chunk) in raw[..n * 4].chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (file_row, col) = (k / row, k % row);
        data[(height - 1 - file_row) * row + col] = v as f64;
    }
    Map::from_vec(width, height, channels, data)
}

// ---------------------------------------------------------------------------
// PNG previews
// ---------------------------------------------------------------------------

/// Tone-maps linear values (`v * 2^exposure`, clamped, gamma 2.2) to 8-bit PNG.
pub fn write_png(path: impl AsRef<Path>, map: &Map, exposure: f64) -> Result<()> {
    let gain = exposure.exp2();
    let px: Vec<u8> = map
        .data
        .iter()
        .map(|v| {
            let t = (v * gain).clamp(0.0, 1.0).powf(1.0 / 2.2);
            (t * 255.0).round() as u8
        })
        .collect();
    let (w, h) = (map.width as u32, map.height as u32);
    match map.channels {
        1 => image::GrayImage::from_raw(w, h, px).map(|i| i.save(path)),
        3 => image::RgbImage::from_raw(w, h, px).map(|i| i.save(path)),
        c => return invalid(format!("PNG previews need 1 or 3 channels, not {c}")),
    }
    .expect("buffer matches dimensions")?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Per-pixel environment maps
// ---------------------------------------------------------------------------

/// Per-pixel environment maps held as a map whose channels are the
/// flattened `env_height x env_width` RGB texels of each pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvField {
    pub env_height: usize,
    pub env_width: usize,
    pub map: Map,
}

impl EnvField {
    pub fn new(width: usize, height: usize, env_height: usize, env_width: usize) -> Self {
        Self {
            env_height,
            env_width,
            map: Map::new(width, height, env_height * env_width * 3),
        }
    }

    pub fn texels(&self, x: usize, y: usize) -> Vec<Rgb> {
        self.map.pixel(x, y).chunks_exact(3).map(|c| Rgb::new(c[0], c[1], c[2])).collect()
    }

    pub fn set_texels(&mut self, x: usize, y: usize, texels: &[Rgb]) {
        let i = self.map.index(x, y);
        for (k, t) in texels.iter().enumerate() {
            self.map.data[i + 3 * k..i + 3 * k + 3].copy_from_slice(t.as_slice());
        }
    }

    /// Layout as one `(H * env_height) x (W * env_width)` RGB image.
    pub fn to_tiled(&self) -> Map {
        let (eh, ew) = (self.env_height, self.env_width);
        Map::from_fn(self.map.width * ew, self.map.height * eh, 3, |x, y, c| {
            let (px, tc) = (x / ew, x % ew);
            let (py, tr) = (y / eh, y % eh);
            self.map.get(px, py, (tr * ew + tc) * 3 + c)
        })
    }

    pub fn from_tiled(tiled: &Map, env_height: usize, env_width: usize) -> Result<Self> {
        if tiled.channels != 3 || env_height == 0 || env_width == 0 {
            return invalid("tiled environment maps must be RGB with non-zero tiles");
        }
        if tiled.width % env_width != 0 || tiled.height % env_height != 0 {
            return invalid(format!(
                "{}x{} image is not a whole number of {env_width}x{env_height} tiles",
                tiled.width, tiled.height
            ));
        }
        let mut f = Self::new(tiled.width / env_width, tiled.height / env_height, env_height, env_width);
        for y in 0..tiled.height {
            for x in 0..tiled.width {
                let (px, tc, py, tr) = (x / env_width, x % env_width, y / env_height, y % env_height);
                for c in 0..3 {
                    f.map.set(px, py, (tr * env_width + tc) * 3 + c, tiled.get(x, y, c));
                }
            }
        }
        Ok(f)
    }
}

pub fn write_env_pfm(path: impl AsRef<Path>, field: &EnvField) -> Result<()> {
    write_pfm(path, &field.to_tiled())
}

pub fn read_env_pfm(path: impl AsRef<Path>, env_height: usize, env_width: usize) -> Result<EnvField> {
    EnvField::from_tiled(&read_pfm(path)?, env_height, env_width)
}

// ---------------------------------------------------------------------------
// JSON documents
// ---------------------------------------------------------------------------

pub fn write_json<T: Serialize + ?Sized>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut f = fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    Ok(serde_json::from_reader(BufReader::new(fs::File::open(path)?))?)
}

/// Reads a JSON or TOML document, chosen by file extension.
pub fn read_config<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()) {
        Some("toml") => {
            let text = fs::read_to_string(path)?;
            toml::from_str(&text).or_else(|e| format_err("TOML config", e.to_string()))
        }
        _ => read_json(path),
    }
}

pub fn write_camera(path: impl AsRef<Path>, camera: &Camera) -> Result<()> {
    write_json(path, camera)
}

pub fn read_camera(path: impl AsRef<Path>) -> Result<Camera> {
    read_json(path)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct LobeJson {
    theta: f64,
    phi: f64,
    sharpness: f64,
    intensity: [f64; 3],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct SgEnvJson {
    lobes: Vec<LobeJson>,
    #[serde(default)]
    visibility: Option<Vec<f64>>,
}

pub fn sg_env_to_json(env: &SgEnvironment) -> serde_json::Value {
    let doc = SgEnvJson {
        lobes: env
            .lobes()
            .iter()
            .map(|l| LobeJson {
                theta: l.theta,
                phi: l.phi,
                sharpness: l.sharpness,
                intensity: [l.intensity.x, l.intensity.y, l.intensity.z],
            })
            .collect(),
        visibility: Some(env.visibility().to_vec()),
    };
    serde_json::to_value(doc).expect("plain data serializes")
}

pub fn sg_env_from_json(value: serde_json::Value) -> Result<SgEnvironment> {
    let doc: SgEnvJson = serde_json::from_value(value)?;
    let lobes = doc
        .lobes
        .iter()
        .map(|l| SgLobe::new(l.theta, l.phi, l.sharpness, Rgb::from(l.intensity)))
        .collect::<Result<Vec<_>>>()?;
    match doc.visibility {
        Some(mu) => SgEnvironment::with_visibility(lobes, mu),
        None => SgEnvironment::new(lobes),
    }
}

pub fn write_sg_env(path: impl AsRef<Path>, env: &SgEnvironment) -> Result<()> {
    write_json(path, &sg_env_to_json(env))
}

pub fn read_sg_env(path: impl AsRef<Path>) -> Result<SgEnvironment> {
    sg_env_from_json(read_json(path)?)
}

// ---------------------------------------------------------------------------
// Volumes
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub dims: [usize; 3],
    pub bounds: BoundsJson,
    pub channel_order: Vec<String>,
    pub dtype: String,
    pub layout: String,
    /// Sidecar file name, relative to the header.
    pub data: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundsJson {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl From<&Aabb> for BoundsJson {
    fn from(b: &Aabb) -> Self {
        Self {
            min: [b.min.x, b.min.y, b.min.z],
            max: [b.max.x, b.max.y, b.max.z],
        }
    }
}

impl BoundsJson {
    pub fn to_aabb(&self) -> Result<Aabb> {
        Aabb::new(Vec3::from(self.min), Vec3::from(self.max))
    }
}

fn sidecar_path(header: &Path) -> PathBuf {
    header.with_extension("bin")
}

fn write_volume_raw(path: &Path, dims: [usize; 3], bounds: &Aabb, channels: &[&str], values: &[f64]) -> Result<()> {
    let bin = sidecar_path(path);
    let header = VolumeHeader {
        dims,
        bounds: bounds.into(),
        channel_order: channels.iter().map(|s| s.to_string()).collect(),
        dtype: "f32".into(),
        layout: "x-major".into(),
        data: bin
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or("volume.bin")
            .to_string(),
    };
    let bytes: Vec<u8> = values.iter().flat_map(|v| (*v as f32).to_le_bytes()).collect();
    fs::write(&bin, bytes)?;
    write_json(path, &header)
}

fn read_volume_raw(path: &Path, expect: &[&str]) -> Result<(VolumeHeader, Vec<f64>)> {
    let header: VolumeHeader = read_json(path)?;
    if header.dtype != "f32" || header.layout != "x-major" {
        return format_err("volume header", format!("unsupported dtype {} / layout {}", header.dtype, header.layout));
    }
    if header.channel_order != expect {
        return format_err("volume header", format!("channel order {:?}, expected {expect:?}", header.channel_order));
    }
    let bin = path.parent().unwrap_or(Path::new(".")).join(&header.data);
    let raw = fs::read(bin)?;
    let n = header.dims.iter().product::<usize>() * expect.len();
    if raw.len() != n * 4 {
        return format_err("volume data", format!("expected {} bytes, found {}", n * 4, raw.len()));
    }
    let values = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok((header, values))
}

pub fn write_volume(path: impl AsRef<Path>, volume: &VsgVolume) -> Result<()> {
    let values: Vec<f64> = volume.voxels().iter().flat_map(|v| v.channels()).collect();
    write_volume_raw(path.as_ref(), volume.dims(), volume.bounds(), &VOXEL_CHANNELS, &values)
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<VsgVolume> {
    let (h, values) = read_volume_raw(path.as_ref(), &VOXEL_CHANNELS)?;
    let voxels = values
        .chunks_exact(VOXEL_CHANNELS.len())
        .map(|c| {
            let mut v = Voxel::from_channels(c);
            // f32 storage can push a stored 1.0 - eps opacity to exactly 1 or slightly past it.
            v.alpha = v.alpha.clamp(0.0, 1.0);
            v
        })
        .collect();
    VsgVolume::new(h.dims, h.bounds.to_aabb()?, voxels)
}

/// Surface volume channels followed by `rho`.
pub fn write_surface_volume(path: impl AsRef<Path>, volume: &SurfaceVolume) -> Result<()> {
    let mut channels: Vec<&str> = SURFACE_CHANNELS.to_vec();
    channels.push("rho");
    let nc = SURFACE_CHANNELS.len();
    let values: Vec<f64> = volume
        .data
        .chunks_exact(nc)
        .zip(&volume.rho)
        .flat_map(|(t, r)| t.iter().copied().chain(std::iter::once(*r)))
        .collect();
    write_volume_raw(path.as_ref(), volume.dims, &volume.bounds, &channels, &values)
}

// ---------------------------------------------------------------------------
// Scene directories
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct SceneHeader {
    spec: SceneSpec,
    views: usize,
    target_index: usize,
}

/// Writes `scene.json` plus, per view `k`, `im_k.pfm`, `depth_k.pfm`,
/// `conf_k.pfm`, `cam_k.json` and the `gt_*_k.pfm` ground truth.
pub fn write_scene(dir: impl AsRef<Path>, scene: &Scene) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    write_json(
        dir.join("scene.json"),
        &SceneHeader {
            spec: scene.spec.clone(),
            views: scene.bundle.views.len(),
            target_index: scene.bundle.target_index,
        },
    )?;
    for (k, (view, truth)) in scene.bundle.views.iter().zip(&scene.truth).enumerate() {
        write_pfm(dir.join(format!("im_{k}.pfm")), &view.image)?;
        write_pfm(dir.join(format!("depth_{k}.pfm")), &view.depth)?;
        write_pfm(dir.join(format!("conf_{k}.pfm")), &view.confidence)?;
        write_camera(dir.join(format!("cam_{k}.json")), &view.camera)?;
        write_pfm(dir.join(format!("gt_albedo_{k}.pfm")), &truth.albedo)?;
        write_pfm(dir.join(format!("gt_rough_{k}.pfm")), &truth.roughness)?;
        write_pfm(dir.join(format!("gt_normal_{k}.pfm")), &truth.normal)?;
        write_env_pfm(dir.join(format!("gt_env_{k}.pfm")), &truth.env)?;
    }
    Ok(())
}

pub fn read_scene(dir: impl AsRef<Path>) -> Result<Scene> {
    let dir = dir.as_ref();
    let header: SceneHeader = read_json(dir.join("scene.json"))?;
    let (eh, ew) = (header.spec.env_height, header.spec.env_width);
    let mut views = Vec::with_capacity(header.views);
    let mut truth = Vec::with_capacity(header.views);
    for k in 0..header.views {
        views.push(View {
            image: read_pfm(dir.join(format!("im_{k}.pfm")))?,
            depth: read_pfm(dir.join(format!("depth_{k}.pfm")))?,
            confidence: read_pfm(dir.join(format!("conf_{k}.pfm")))?,
            camera: read_camera(dir.join(format!("cam_{k}.json")))?,
        });
        truth.push(ViewTruth {
            albedo: read_pfm(dir.join(format!("gt_albedo_{k}.pfm")))?,
            roughness: read_pfm(dir.join(format!("gt_rough_{k}.pfm")))?,
            normal: read_pfm(dir.join(format!("gt_normal_{k}.pfm")))?,
            env: read_env_pfm(dir.join(format!("gt_env_{k}.pfm")), eh, ew)?,
        });
    }
    Ok(Scene {
        spec: header.spec,
        bundle: ViewBundle::new(views, header.target_index)?,
        truth,
    })
}

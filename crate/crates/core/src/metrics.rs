//! Masked losses and metrics used to supervise and evaluate every stage.
//!
//! Inputs are flat arrays holding `channels` values per pixel; a mask holds
//! one value per pixel, where any non-zero entry selects the pixel. Every
//! metric is a mean over the selected elements, only ever reads selected
//! elements, and returns 0 flagged as `empty_mask` when nothing is selected.
//!
//! The least-squares scale `tau` always scales the second argument `B` onto
//! the first argument `A`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::image::Map;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub value: f64,
    pub empty_mask: bool,
}

impl Score {
    fn empty() -> Self {
        Self {
            value: 0.0,
            empty_mask: true,
        }
    }

    fn of(value: f64) -> Self {
        Self {
            value,
            empty_mask: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleFit {
    pub tau: f64,
    /// Set when the masked reference is identically zero (tau forced to 0).
    pub degenerate: bool,
}

/// Angle between two vectors as `atan2(|a ^ b|, a . b)`. For unit vectors this
/// is `acos(a . b)`, but it stays accurate near 0 and pi and is exactly 0 for
/// equal inputs.
fn angle(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let mut wedge = 0.0;
    for i in 0..a.len() {
        for j in i + 1..a.len() {
            wedge += (a[i] * b[j] - a[j] * b[i]).powi(2);
        }
    }
    wedge.sqrt().atan2(dot)
}

/// Two equally shaped arrays plus an optional per-pixel mask.
#[derive(Clone, Copy, Debug)]
pub struct MaskedPair<'a> {
    a: &'a [f64],
    b: &'a [f64],
    mask: Option<&'a [f64]>,
    channels: usize,
}

impl<'a> MaskedPair<'a> {
    pub fn new(a: &'a [f64], b: &'a [f64], mask: Option<&'a [f64]>, channels: usize) -> Result<Self> {
        if channels == 0 {
            return invalid("channels must be >= 1");
        }
        if a.len() != b.len() {
            return invalid(format!("shape mismatch: {} vs {} values", a.len(), b.len()));
        }
        if a.len() % channels != 0 {
            return invalid(format!("{} values are not a multiple of {channels} channels", a.len()));
        }
        if let Some(m) = mask {
            if m.len() * channels != a.len() {
                return invalid(format!(
                    "mask has {} pixels but data has {}",
                    m.len(),
                    a.len() / channels
                ));
            }
            if m.iter().any(|v| *v != 0.0 && *v != 1.0) {
                return invalid("mask values must be 0 or 1");
            }
        }
        Ok(Self { a, b, mask, channels })
    }

    pub fn from_maps(a: &'a Map, b: &'a Map, mask: Option<&'a Map>) -> Result<Self> {
        if !a.same_shape(b) || a.channels != b.channels {
            return invalid("maps differ in shape");
        }
        if let Some(m) = mask {
            if !m.same_shape(a) || m.channels != 1 {
                return invalid("mask must be a single-channel map of the same size");
            }
        }
        Self::new(&a.data, &b.data, mask.map(|m| m.data.as_slice()), a.channels)
    }

    pub fn pixels(&self) -> usize {
        self.a.len() / self.channels
    }

    fn selected(&self, p: usize) -> bool {
        self.mask.is_none_or(|m| m[p] != 0.0)
    }

    /// Selected element pairs, pixel by pixel.
    fn elements(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        let ch = self.channels;
        (0..self.pixels())
            .filter(move |p| self.selected(*p))
            .flat_map(move |p| (p * ch..(p + 1) * ch).map(move |i| (self.a[i], self.b[i])))
    }

    fn mean_over_elements(&self, f: impl Fn(f64, f64) -> f64) -> Score {
        let (sum, count) = self
            .elements()
            .fold((0.0, 0usize), |(s, n), (a, b)| (s + f(a, b), n + 1));
        if count == 0 {
            Score::empty()
        } else {
            Score::of(sum / count as f64)
        }
    }

    /// `tau = sum(A B) / sum(B B)` over the selection.
    pub fn ls_scale(&self) -> ScaleFit {
        let (ab, bb) = self
            .elements()
            .fold((0.0, 0.0), |(ab, bb), (a, b)| (ab + a * b, bb + b * b));
        if bb == 0.0 {
            ScaleFit {
                tau: 0.0,
                degenerate: true,
            }
        } else {
            ScaleFit {
                tau: ab / bb,
                degenerate: false,
            }
        }
    }

    /// g1: mean angle (radians) between per-pixel vectors.
    pub fn l1_angular(&self) -> Score {
        let ch = self.channels;
        let (sum, count) = (0..self.pixels())
            .filter(|p| self.selected(*p))
            .fold((0.0, 0usize), |(s, n), p| {
                let (a, b) = (&self.a[p * ch..(p + 1) * ch], &self.b[p * ch..(p + 1) * ch]);
                (s + angle(a, b), n + 1)
            });
        if count == 0 {
            Score::empty()
        } else {
            Score::of(sum / count as f64)
        }
    }

    /// g2: mean squared difference.
    pub fn mse(&self) -> Score {
        self.mean_over_elements(|a, b| (a - b) * (a - b))
    }

    /// g3: MSE after scaling B by the least-squares tau.
    pub fn si_mse(&self) -> (Score, ScaleFit) {
        let fit = self.ls_scale();
        let tau = fit.tau;
        (
            self.mean_over_elements(|a, b| {
                let d = a - tau * b;
                d * d
            }),
            fit,
        )
    }

    /// g4: log-space MSE after scaling B by the (linear-space) least-squares tau.
    pub fn si_log_mse(&self) -> (Score, ScaleFit) {
        let fit = self.ls_scale();
        (self.log_mse_with_scale(fit.tau), fit)
    }

    pub fn log_mse_with_scale(&self, tau: f64) -> Score {
        self.mean_over_elements(|a, b| {
            let d = a.ln_1p() - (tau * b).ln_1p();
            d * d
        })
    }
}

pub fn ls_scale(a: &[f64], b: &[f64], mask: Option<&[f64]>, channels: usize) -> Result<ScaleFit> {
    Ok(MaskedPair::new(a, b, mask, channels)?.ls_scale())
}

/// g1.
pub fn masked_l1_angular(a: &[f64], b: &[f64], mask: Option<&[f64]>) -> Result<Score> {
    Ok(MaskedPair::new(a, b, mask, 3)?.l1_angular())
}

/// g2.
pub fn masked_mse(a: &[f64], b: &[f64], mask: Option<&[f64]>, channels: usize) -> Result<Score> {
    Ok(MaskedPair::new(a, b, mask, channels)?.mse())
}

/// g3.
pub fn si_mse(a: &[f64], b: &[f64], mask: Option<&[f64]>, channels: usize) -> Result<Score> {
    Ok(MaskedPair::new(a, b, mask, channels)?.si_mse().0)
}

/// g4.
pub fn si_log_mse(a: &[f64], b: &[f64], mask: Option<&[f64]>, channels: usize) -> Result<Score> {
    Ok(MaskedPair::new(a, b, mask, channels)?.si_log_mse().0)
}

/// g5: mean of `-A ln A`, with `0 ln 0 = 0`.
pub fn entropy_reg(values: &[f64]) -> Result<Score> {
    if values.is_empty() {
        return Ok(Score::empty());
    }
    if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return invalid(format!("entropy regularizer expects values in [0, 1] (got {v})"));
    }
    let sum: f64 = values
        .iter()
        .map(|&a| if a == 0.0 { 0.0 } else { -a * a.ln() })
        .sum();
    Ok(Score::of(sum / values.len() as f64))
}

/// Unmasked log-space MSE with unit scale (the fitting objective's data term).
pub fn log_mse_unit_scale(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    if n == 0 {
        return 0.0;
    }
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x.ln_1p() - y.ln_1p();
            d * d
        })
        .sum::<f64>()
        / n as f64
}

// ---------------------------------------------------------------------------
// Stage losses
// ---------------------------------------------------------------------------

/// Loss weights per stage; defaults are the published training weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageBetas {
    pub normal: [f64; 2],
    pub in_dl: [f64; 2],
    pub ex_dl: [f64; 2],
    pub brdf: [f64; 2],
    pub svl: [f64; 3],
}

impl Default for StageBetas {
    fn default() -> Self {
        Self {
            normal: [1.0, 1.0],
            in_dl: [1.0, 1e-3],
            ex_dl: [1.0, 1e-4],
            brdf: [3.0, 1.0],
            svl: [10.0, 1e-2, 1.0],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Normal,
    InDl,
    ExDl,
    Brdf,
    Svl,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Normal, Stage::InDl, Stage::ExDl, Stage::Brdf, Stage::Svl];

    pub fn name(&self) -> &'static str {
        match self {
            Stage::Normal => "normal",
            Stage::InDl => "in_dl",
            Stage::ExDl => "ex_dl",
            Stage::Brdf => "brdf",
            Stage::Svl => "svl",
        }
    }
}

/// Ground truth (`*_gt`), predictions (`*_pred`) and masks for the stage
/// losses. Environment maps are stored as maps whose channels hold a whole
/// flattened per-pixel environment.
#[derive(Clone, Debug, Default)]
pub struct StageInputs {
    pub normal_gt: Option<Map>,
    pub normal_pred: Option<Map>,
    /// Mask of valid materials and area lights.
    pub mask_l: Option<Map>,
    /// Mask of valid materials.
    pub mask_o: Option<Map>,
    pub env_dl_gt: Option<Map>,
    pub env_dl_pred: Option<Map>,
    pub visibility: Option<Vec<f64>>,
    pub alpha_dl: Option<Vec<f64>>,
    pub albedo_gt: Option<Map>,
    pub albedo_pred: Option<Map>,
    pub roughness_gt: Option<Map>,
    pub roughness_pred: Option<Map>,
    pub env_svl_gt: Option<Map>,
    pub env_svl_pred: Option<Map>,
    pub alpha_svl: Option<Vec<f64>>,
    /// Observed images, one per view.
    pub images: Option<Vec<Map>>,
    pub diffuse_render: Option<Map>,
    /// Specular re-renders, one per view.
    pub specular_renders: Option<Vec<Map>>,
    /// Per-pixel multi-view weights, one single-channel map per view.
    pub view_weights: Option<Vec<Map>>,
    pub target_index: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageLoss {
    pub total: f64,
    /// Unweighted component values (e.g. `g1`, `g5`, `tau_diff`).
    pub terms: BTreeMap<String, f64>,
}

fn need<'a, T>(v: &'a Option<T>, name: &str) -> Result<&'a T> {
    v.as_ref().ok_or_else(|| Error::MissingInput(name.to_string()))
}

fn pair<'a>(a: &'a Map, b: &'a Map, mask: &'a Map) -> Result<MaskedPair<'a>> {
    MaskedPair::from_maps(a, b, Some(mask))
}

pub fn loss_normal(inp: &StageInputs, betas: &StageBetas) -> Result<StageLoss> {
    let gt = need(&inp.normal_gt, "normal_gt")?;
    let pred = need(&inp.normal_pred, "normal_pred")?;
    let mask = need(&inp.mask_l, "mask_l")?;
    let p = pair(gt, pred, mask)?;
    let g1 = p.l1_angular().value;
    let g2 = p.mse().value;
    Ok(StageLoss {
        total: betas.normal[0] * g1 + betas.normal[1] * g2,
        terms: BTreeMap::from([("g1".into(), g1), ("g2".into(), g2)]),
    })
}

fn lighting_loss(
    gt: &Map,
    pred: &Map,
    mask: &Map,
    reg: &[f64],
    betas: [f64; 2],
) -> Result<StageLoss> {
    let (g4, fit) = pair(gt, pred, mask)?.si_log_mse();
    let g5 = entropy_reg(reg)?.value;
    Ok(StageLoss {
        total: betas[0] * g4.value + betas[1] * g5,
        terms: BTreeMap::from([
            ("g4".into(), g4.value),
            ("g5".into(), g5),
            ("tau".into(), fit.tau),
        ]),
    })
}

pub fn loss_in_dl(inp: &StageInputs, betas: &StageBetas) -> Result<StageLoss> {
    lighting_loss(
        need(&inp.env_dl_gt, "env_dl_gt")?,
        need(&inp.env_dl_pred, "env_dl_pred")?,
        need(&inp.mask_o, "mask_o")?,
        need(&inp.visibility, "visibility")?,
        betas.in_dl,
    )
}

pub fn loss_ex_dl(inp: &StageInputs, betas: &StageBetas) -> Result<StageLoss> {
    lighting_loss(
        need(&inp.env_dl_gt, "env_dl_gt")?,
        need(&inp.env_dl_pred, "env_dl_pred")?,
        need(&inp.mask_o, "mask_o")?,
        need(&inp.alpha_dl, "alpha_dl")?,
        betas.ex_dl,
    )
}

pub fn loss_brdf(inp: &StageInputs, betas: &StageBetas) -> Result<StageLoss> {
    let mask = need(&inp.mask_o, "mask_o")?;
    let (g3, fit) = pair(
        need(&inp.albedo_gt, "albedo_gt")?,
        need(&inp.albedo_pred, "albedo_pred")?,
        mask,
    )?
    .si_mse();
    let g2 = pair(
        need(&inp.roughness_gt, "roughness_gt")?,
        need(&inp.roughness_pred, "roughness_pred")?,
        mask,
    )?
    .mse();
    Ok(StageLoss {
        total: betas.brdf[0] * g3.value + betas.brdf[1] * g2.value,
        terms: BTreeMap::from([
            ("g3".into(), g3.value),
            ("g2".into(), g2.value),
            ("tau".into(), fit.tau),
        ]),
    })
}

/// Joint least-squares scales `(tau_diff, tau_spec)` so that
/// `image ~ tau_diff * diffuse + tau_spec * specular` over the mask.
pub fn rerender_scales(image: &Map, diffuse: &Map, specular: &Map, mask: &Map) -> Result<(f64, f64)> {
    let pd = pair(image, diffuse, mask)?;
    pair(image, specular, mask)?;
    let ch = image.channels;
    let (mut dd, mut ds, mut ss, mut id, mut is) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for p in (0..image.pixels()).filter(|p| mask.data[*p] != 0.0) {
        for i in p * ch..(p + 1) * ch {
            let (y, d, s) = (image.data[i], diffuse.data[i], specular.data[i]);
            dd += d * d;
            ds += d * s;
            ss += s * s;
            id += y * d;
            is += y * s;
        }
    }
    let det = dd * ss - ds * ds;
    if det > 1e-12 * dd * ss && det > 0.0 {
        Ok(((id * ss - is * ds) / det, (is * dd - id * ds) / det))
    } else {
        // Collinear or empty renders: fall back to independent regressions.
        let td = pd.ls_scale().tau;
        let ts = pair(image, specular, mask)?.ls_scale().tau;
        Ok((td, if dd > 0.0 { 0.0 } else { ts }))
    }
}

pub fn loss_svl(inp: &StageInputs, betas: &StageBetas) -> Result<StageLoss> {
    let mask = need(&inp.mask_o, "mask_o")?;
    let (g4, fit) = pair(
        need(&inp.env_svl_gt, "env_svl_gt")?,
        need(&inp.env_svl_pred, "env_svl_pred")?,
        mask,
    )?
    .si_log_mse();
    let g5 = entropy_reg(need(&inp.alpha_svl, "alpha_svl")?)?.value;

    let images = need(&inp.images, "images")?;
    let diffuse = need(&inp.diffuse_render, "diffuse_render")?;
    let specular = need(&inp.specular_renders, "specular_renders")?;
    let weights = need(&inp.view_weights, "view_weights")?;
    if images.len() != specular.len() || images.len() != weights.len() {
        return invalid("images, specular_renders and view_weights must have one entry per view");
    }
    let target = images
        .get(inp.target_index)
        .ok_or_else(|| Error::InvalidArgument("target_index out of range".into()))?;
    let (tau_diff, tau_spec) = rerender_scales(target, diffuse, &specular[inp.target_index], mask)?;

    let mut rerender = 0.0;
    for ((img, spec), w) in images.iter().zip(specular).zip(weights) {
        pair(img, spec, mask)?;
        pair(img, diffuse, mask)?;
        if !w.same_shape(img) || w.channels != 1 {
            return invalid("view weights must be single-channel maps of the image size");
        }
        let ch = img.channels;
        let mut sum = 0.0;
        let mut count = 0usize;
        for p in (0..img.pixels()).filter(|p| mask.data[*p] != 0.0) {
            for i in p * ch..(p + 1) * ch {
                let r = w.data[p] * (img.data[i] - tau_diff * diffuse.data[i] - tau_spec * spec.data[i]);
                sum += r * r;
                count += 1;
            }
        }
        if count > 0 {
            rerender += sum / count as f64;
        }
    }

    Ok(StageLoss {
        total: betas.svl[0] * g4.value + betas.svl[1] * g5 + betas.svl[2] * rerender,
        terms: BTreeMap::from([
            ("g4".into(), g4.value),
            ("g5".into(), g5),
            ("rerender".into(), rerender),
            ("tau".into(), fit.tau),
            ("tau_diff".into(), tau_diff),
            ("tau_spec".into(), tau_spec),
        ]),
    })
}

pub fn stage_loss(stage: Stage, inputs: &StageInputs, betas: &StageBetas) -> Result<StageLoss> {
    match stage {
        Stage::Normal => loss_normal(inputs, betas),
        Stage::InDl => loss_in_dl(inputs, betas),
        Stage::ExDl => loss_ex_dl(inputs, betas),
        Stage::Brdf => loss_brdf(inputs, betas),
        Stage::Svl => loss_svl(inputs, betas),
    }
}

/// Evaluates the requested stages, keyed by stage name.
pub fn stage_losses(
    inputs: &StageInputs,
    betas: &StageBetas,
    stages: &[Stage],
) -> Result<BTreeMap<String, StageLoss>> {
    stages
        .iter()
        .map(|s| Ok((s.name().to_string(), stage_loss(*s, inputs, betas)?)))
        .collect()
}

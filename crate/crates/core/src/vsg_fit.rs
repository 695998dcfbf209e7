//! Fitting a VSG volume to per-point environment maps.
//!
//! Objective: `beta_lighting * sum_targets g4(target, extracted)` plus
//! `beta_entropy * mean_voxels(-alpha ln alpha)`, where `g4` is the log-space
//! MSE with unit scale. Gradients flow analytically through the compositing
//! chain and the trilinear interpolation. Voxel channels are optimized through
//! `alpha = sigmoid(a)`, `lambda = exp(q)` and `eta = exp(p)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::envmap::EnvMapGrid;
use crate::error::{invalid, Result};
use crate::math::{logistic, logit, spherical_partials, spherical_to_unit, unit_to_spherical, Rgb, Vec3};
use crate::optim::{minimize, FitReport, LbfgsOptions};
use crate::vsg::{Aabb, Ray, Stencil, Voxel, VsgVolume};

/// Parameters per voxel: logit(alpha), theta, phi, ln(lambda), ln(eta_rgb).
pub const PARAMS_PER_VOXEL: usize = 7;

const MIN_POSITIVE: f64 = 1e-8;

/// One supervision point: a surface point and the environment map observed
/// there (the map carries the local frame).
#[derive(Clone, Debug)]
pub struct VsgTarget {
    pub point: Vec3,
    pub env: EnvMapGrid,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct VsgFitOptions {
    pub n_samples: usize,
    pub max_iters: usize,
    /// Weight of the summed log-space lighting error.
    pub beta_lighting: f64,
    /// Weight of the opacity entropy regularizer.
    pub beta_entropy: f64,
    pub init_alpha: f64,
    pub init_sharpness: f64,
    pub init_intensity: f64,
    pub target_objective: f64,
}

impl Default for VsgFitOptions {
    fn default() -> Self {
        Self {
            n_samples: crate::vsg::DEFAULT_RAY_SAMPLES,
            max_iters: 1000,
            beta_lighting: 10.0,
            beta_entropy: 1e-2,
            init_alpha: 0.05,
            init_sharpness: 0.5,
            init_intensity: 0.1,
            target_objective: 0.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct VsgFitResult {
    pub volume: VsgVolume,
    pub report: FitReport,
    /// Unweighted sum of per-target log-space errors at the solution.
    pub lighting_error: f64,
    /// Mean opacity entropy at the solution.
    pub entropy: f64,
}

struct TargetRays {
    /// Per texel: ray direction and sample stencils.
    rays: Vec<(Vec3, Vec<Stencil>)>,
    log_target: Vec<[f64; 3]>,
}

/// The fitting objective, exposed for gradient checks.
pub struct VsgFitProblem {
    template: VsgVolume,
    targets: Vec<TargetRays>,
    beta_lighting: f64,
    beta_entropy: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ObjectiveParts {
    pub lighting: f64,
    pub entropy: f64,
}

impl VsgFitProblem {
    pub fn new(
        targets: &[VsgTarget],
        dims: [usize; 3],
        bounds: Aabb,
        options: &VsgFitOptions,
    ) -> Result<Self> {
        if targets.is_empty() {
            return invalid("vsg_fit needs at least one target");
        }
        if options.n_samples == 0 {
            return invalid("n_samples must be >= 1");
        }
        let template = VsgVolume::uniform(dims, bounds, Voxel::EMPTY)?;
        let t_max = bounds.diagonal();
        let prepared = targets
            .iter()
            .map(|tg| {
                if tg.env.texels().iter().any(|t| t.iter().any(|c| !c.is_finite() || *c < 0.0)) {
                    return invalid("target environment maps must be finite and >= 0");
                }
                let origin = template.surface_origin(&tg.point, &tg.env.frame().normal);
                let rays = tg
                    .env
                    .directions()
                    .into_iter()
                    .map(|d| {
                        let ray = Ray {
                            origin,
                            direction: d,
                            t_max,
                        };
                        let stencils = template
                            .sample_positions(&ray, options.n_samples)
                            .into_iter()
                            .map(|t| template.stencil(&ray.at(t)))
                            .collect();
                        (d, stencils)
                    })
                    .collect();
                let log_target = tg
                    .env
                    .texels()
                    .iter()
                    .map(|t| [t.x.ln_1p(), t.y.ln_1p(), t.z.ln_1p()])
                    .collect();
                Ok(TargetRays { rays, log_target })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            template,
            targets: prepared,
            beta_lighting: options.beta_lighting,
            beta_entropy: options.beta_entropy,
        })
    }

    pub fn num_params(&self) -> usize {
        self.template.voxels().len() * PARAMS_PER_VOXEL
    }

    pub fn params_from_volume(volume: &VsgVolume) -> Vec<f64> {
        volume
            .voxels()
            .iter()
            .flat_map(|v| {
                let a = v.alpha.clamp(MIN_POSITIVE, 1.0 - 1e-12);
                [
                    logit(a),
                    v.theta,
                    v.phi,
                    v.sharpness.max(MIN_POSITIVE).ln(),
                    v.intensity.x.max(MIN_POSITIVE).ln(),
                    v.intensity.y.max(MIN_POSITIVE).ln(),
                    v.intensity.z.max(MIN_POSITIVE).ln(),
                ]
            })
            .collect()
    }

    pub fn volume_from_params(&self, params: &[f64]) -> Result<VsgVolume> {
        let voxels = params
            .chunks_exact(PARAMS_PER_VOXEL)
            .map(|p| {
                let (theta, phi) = unit_to_spherical(&spherical_to_unit(p[1], p[2]));
                Voxel {
                    alpha: logistic(p[0]),
                    theta,
                    phi,
                    sharpness: p[3].exp(),
                    intensity: Rgb::new(p[4].exp(), p[5].exp(), p[6].exp()),
                }
            })
            .collect();
        VsgVolume::new(self.template.dims(), *self.template.bounds(), voxels)
    }

    pub fn initial_params(&self, options: &VsgFitOptions) -> Vec<f64> {
        let init = Voxel {
            alpha: options.init_alpha,
            theta: 0.0,
            phi: 0.0,
            sharpness: options.init_sharpness,
            intensity: Rgb::repeat(options.init_intensity),
        };
        let vol = VsgVolume::uniform(self.template.dims(), *self.template.bounds(), init)
            .expect("template volume is valid");
        Self::params_from_volume(&vol)
    }

    pub fn objective(&self, params: &[f64], grad: &mut [f64]) -> f64 {
        let (value, _) = self.objective_parts(params, grad);
        value
    }

    /// Objective value and its two unweighted terms; writes the gradient.
    pub fn objective_parts(&self, params: &[f64], grad: &mut [f64]) -> (f64, ObjectiveParts) {
        let decoded = Decoded::new(params);
        let per_target: Vec<(f64, Vec<f64>)> = self
            .targets
            .par_iter()
            .map(|tg| {
                let mut g = vec![0.0; params.len()];
                let v = target_loss(tg, &decoded, &mut g);
                (v, g)
            })
            .collect();

        grad.fill(0.0);
        let mut lighting = 0.0;
        for (v, g) in &per_target {
            lighting += v;
            for (acc, gi) in grad.iter_mut().zip(g) {
                *acc += self.beta_lighting * gi;
            }
        }

        let n_vox = decoded.alpha.len() as f64;
        let mut entropy = 0.0;
        for (i, &a) in decoded.alpha.iter().enumerate() {
            if a > 0.0 {
                entropy -= a * a.ln();
                // d(-a ln a)/da * da/dlogit
                grad[i * PARAMS_PER_VOXEL] +=
                    self.beta_entropy * (-a.ln() - 1.0) * a * (1.0 - a) / n_vox;
            }
        }
        entropy /= n_vox;

        let parts = ObjectiveParts { lighting, entropy };
        (
            self.beta_lighting * lighting + self.beta_entropy * entropy,
            parts,
        )
    }
}

/// Voxel channels decoded from raw parameters, plus derivative helpers.
struct Decoded {
    alpha: Vec<f64>,
    axis: Vec<Vec3>,
    d_theta: Vec<Vec3>,
    d_phi: Vec<Vec3>,
    sharpness: Vec<f64>,
    intensity: Vec<[f64; 3]>,
}

impl Decoded {
    fn new(params: &[f64]) -> Self {
        let n = params.len() / PARAMS_PER_VOXEL;
        let mut d = Decoded {
            alpha: Vec::with_capacity(n),
            axis: Vec::with_capacity(n),
            d_theta: Vec::with_capacity(n),
            d_phi: Vec::with_capacity(n),
            sharpness: Vec::with_capacity(n),
            intensity: Vec::with_capacity(n),
        };
        for p in params.chunks_exact(PARAMS_PER_VOXEL) {
            d.alpha.push(logistic(p[0]));
            d.axis.push(spherical_to_unit(p[1], p[2]));
            let (dt, dp) = spherical_partials(p[1], p[2]);
            d.d_theta.push(dt);
            d.d_phi.push(dp);
            d.sharpness.push(p[3].exp());
            d.intensity.push([p[4].exp(), p[5].exp(), p[6].exp()]);
        }
        d
    }
}

struct Sample {
    alpha: f64,
    lambda: f64,
    eta: [f64; 3],
    axis: Vec3,
    axis_norm: f64,
    falloff: f64,
    chord: f64,
    transmittance: f64,
}

/// Mean log-space error for one target; accumulates its gradient into `grad`.
fn target_loss(tg: &TargetRays, dec: &Decoded, grad: &mut [f64]) -> f64 {
    let n = (tg.rays.len() * 3) as f64;
    let mut total = 0.0;
    let mut samples: Vec<Sample> = Vec::new();
    for ((dir, stencils), log_t) in tg.rays.iter().zip(&tg.log_target) {
        let emit_dir = -dir;
        samples.clear();
        let mut transmittance = 1.0;
        let mut radiance = [0.0; 3];
        for st in stencils {
            let mut s = Sample {
                alpha: 0.0,
                lambda: 0.0,
                eta: [0.0; 3],
                axis: Vec3::zeros(),
                axis_norm: 0.0,
                falloff: 0.0,
                chord: 0.0,
                transmittance,
            };
            for &(i, w) in st {
                s.alpha += w * dec.alpha[i];
                s.lambda += w * dec.sharpness[i];
                for c in 0..3 {
                    s.eta[c] += w * dec.intensity[i][c];
                }
                s.axis += dec.axis[i] * w;
            }
            s.axis_norm = s.axis.norm();
            if s.axis_norm > 1e-12 {
                s.axis /= s.axis_norm;
            } else {
                let heaviest = st
                    .iter()
                    .fold((0, f64::NEG_INFINITY), |b, &(i, w)| if w > b.1 { (i, w) } else { b });
                s.axis = dec.axis[heaviest.0];
                s.axis_norm = 0.0;
            }
            s.chord = (emit_dir - s.axis).norm_squared();
            s.falloff = (-0.5 * s.lambda * s.chord).exp();
            let weight = transmittance * s.alpha * s.falloff;
            for c in 0..3 {
                radiance[c] += weight * s.eta[c];
            }
            transmittance *= 1.0 - s.alpha;
            samples.push(s);
        }

        let mut d_rad = [0.0; 3];
        for c in 0..3 {
            let resid = radiance[c].ln_1p() - log_t[c];
            total += resid * resid;
            d_rad[c] = 2.0 * resid / (n * (1.0 + radiance[c]));
        }
        if d_rad.iter().all(|v| *v == 0.0) {
            continue;
        }

        // Back-to-front: `behind` is the radiance composited behind sample n,
        // as seen from just past sample n.
        let mut behind = [0.0f64; 3];
        for (s, st) in samples.iter().zip(stencils).rev() {
            let emission = [
                s.eta[0] * s.falloff,
                s.eta[1] * s.falloff,
                s.eta[2] * s.falloff,
            ];
            let mut d_alpha = 0.0;
            let mut d_falloff = 0.0;
            let mut d_eta = [0.0; 3];
            for c in 0..3 {
                d_alpha += d_rad[c] * s.transmittance * (emission[c] - behind[c]);
                let h = d_rad[c] * s.transmittance * s.alpha;
                d_eta[c] = h * s.falloff;
                d_falloff += h * s.eta[c];
            }
            let d_lambda = d_falloff * s.falloff * (-0.5 * s.chord);
            let d_axis_unit = (emit_dir - s.axis) * (d_falloff * s.falloff * s.lambda);
            let d_axis_sum = if s.axis_norm > 0.0 {
                (d_axis_unit - s.axis * s.axis.dot(&d_axis_unit)) / s.axis_norm
            } else {
                Vec3::zeros()
            };

            for &(i, w) in st {
                if w == 0.0 {
                    continue;
                }
                let g = &mut grad[i * PARAMS_PER_VOXEL..(i + 1) * PARAMS_PER_VOXEL];
                let a = dec.alpha[i];
                g[0] += w * d_alpha * a * (1.0 - a);
                let du = d_axis_sum * w;
                g[1] += du.dot(&dec.d_theta[i]);
                g[2] += du.dot(&dec.d_phi[i]);
                g[3] += w * d_lambda * dec.sharpness[i];
                for c in 0..3 {
                    g[4 + c] += w * d_eta[c] * dec.intensity[i][c];
                }
            }

            for c in 0..3 {
                behind[c] = s.alpha * emission[c] + (1.0 - s.alpha) * behind[c];
            }
        }
    }
    total / n
}

/// Fits a `dims` volume inside `bounds` so that environment maps extracted at
/// each target point match the target maps.
pub fn vsg_fit(
    targets: &[VsgTarget],
    dims: [usize; 3],
    bounds: Aabb,
    options: &VsgFitOptions,
) -> Result<VsgFitResult> {
    let problem = VsgFitProblem::new(targets, dims, bounds, options)?;
    let x0 = problem.initial_params(options);
    let lbfgs = LbfgsOptions {
        max_iters: options.max_iters,
        target: options.target_objective,
        ..Default::default()
    };
    let (x, report) = minimize(|p, g| problem.objective(p, g), x0, &lbfgs);
    let mut g = vec![0.0; x.len()];
    let (_, parts) = problem.objective_parts(&x, &mut g);
    Ok(VsgFitResult {
        volume: problem.volume_from_params(&x)?,
        report,
        lighting_error: parts.lighting,
        entropy: parts.entropy,
    })
}

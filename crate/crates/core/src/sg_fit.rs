//! Fitting an SG environment to a discrete hemispherical radiance map.
//!
//! The objective is the log-space MSE `mean((ln(R + 1) - ln(T + 1))^2)` over
//! every texel and channel, with `R` the rasterized fit and `T` the target.
//! Sharpness and intensity are optimized through `lambda = exp(q)` and
//! `eta = exp(p)`, so both stay positive without clamping.

use serde::{Deserialize, Serialize};

use crate::envmap::EnvMapGrid;
use crate::error::{invalid, Result};
use crate::math::{spherical_partials, spherical_to_unit, unit_to_spherical, Rgb, Vec3};
use crate::optim::{minimize, FitReport, LbfgsOptions};
use crate::sg::{SgEnvironment, SgLobe};

/// Parameters per lobe: theta, phi, ln(lambda), ln(eta_r), ln(eta_g), ln(eta_b).
pub const PARAMS_PER_LOBE: usize = 6;

const MIN_SHARPNESS: f64 = 1e-8;
const MIN_INTENSITY: f64 = 1e-6;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SgFitOptions {
    pub max_iters: usize,
    /// Starting sharpness for the default initialization.
    pub initial_sharpness: f64,
    /// Stop early once the objective reaches this value.
    pub target_objective: f64,
    /// Explicit starting point; must have the requested number of lobes.
    #[serde(skip)]
    pub init: Option<SgEnvironment>,
    /// When a start stalls above the target, retry from deterministic
    /// alternative starts, sharing the same total iteration budget.
    pub restarts: bool,
}

impl Default for SgFitOptions {
    fn default() -> Self {
        Self {
            max_iters: 2000,
            initial_sharpness: 5.0,
            target_objective: 1e-12,
            init: None,
            restarts: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SgFitResult {
    pub env: SgEnvironment,
    pub report: FitReport,
}

/// The fitting objective for one target map, exposed for gradient checks.
pub struct SgFitProblem {
    num_lobes: usize,
    dirs: Vec<Vec3>,
    log_target: Vec<[f64; 3]>,
}

impl SgFitProblem {
    pub fn new(target: &EnvMapGrid, num_lobes: usize) -> Result<Self> {
        if num_lobes == 0 {
            return invalid("num_lobes must be at least 1");
        }
        if target
            .texels()
            .iter()
            .any(|t| t.iter().any(|c| !c.is_finite()))
        {
            return invalid("target environment map contains non-finite texels");
        }
        if target.texels().iter().any(|t| t.iter().any(|c| *c < 0.0)) {
            return invalid("target environment map contains negative texels");
        }
        Ok(Self {
            num_lobes,
            dirs: target.directions(),
            log_target: target
                .texels()
                .iter()
                .map(|t| [t.x.ln_1p(), t.y.ln_1p(), t.z.ln_1p()])
                .collect(),
        })
    }

    pub fn num_params(&self) -> usize {
        self.num_lobes * PARAMS_PER_LOBE
    }

    pub fn params_from_env(env: &SgEnvironment) -> Vec<f64> {
        env.lobes()
            .iter()
            .flat_map(|l| {
                [
                    l.theta,
                    l.phi,
                    l.sharpness.max(MIN_SHARPNESS).ln(),
                    l.intensity.x.max(MIN_INTENSITY).ln(),
                    l.intensity.y.max(MIN_INTENSITY).ln(),
                    l.intensity.z.max(MIN_INTENSITY).ln(),
                ]
            })
            .collect()
    }

    pub fn env_from_params(params: &[f64]) -> Result<SgEnvironment> {
        let lobes = params
            .chunks_exact(PARAMS_PER_LOBE)
            .map(|p| {
                // Canonicalize the angles so the stored lobe honours theta in
                // [0, pi] and phi in [-pi, pi).
                let (theta, phi) = unit_to_spherical(&spherical_to_unit(p[0], p[1]));
                SgLobe::new(
                    theta,
                    phi,
                    p[2].exp(),
                    Rgb::new(p[3].exp(), p[4].exp(), p[5].exp()),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        SgEnvironment::new(lobes)
    }

    /// Objective value; writes the gradient with respect to `params` into `grad`.
    pub fn objective(&self, params: &[f64], grad: &mut [f64]) -> f64 {
        grad.fill(0.0);
        let lobes: Vec<_> = params
            .chunks_exact(PARAMS_PER_LOBE)
            .map(|p| {
                let axis = spherical_to_unit(p[0], p[1]);
                let (d_theta, d_phi) = spherical_partials(p[0], p[1]);
                let lambda = p[2].exp();
                let eta = [p[3].exp(), p[4].exp(), p[5].exp()];
                (axis, d_theta, d_phi, lambda, eta)
            })
            .collect();

        let n = (self.dirs.len() * 3) as f64;
        let mut total = 0.0;
        let mut falloff = vec![0.0; lobes.len()];
        for (dir, log_t) in self.dirs.iter().zip(&self.log_target) {
            let mut radiance = [0.0; 3];
            for (s, (axis, _, _, lambda, eta)) in lobes.iter().enumerate() {
                let e = (-0.5 * lambda * (dir - axis).norm_squared()).exp();
                falloff[s] = e;
                for c in 0..3 {
                    radiance[c] += eta[c] * e;
                }
            }
            let mut d_r = [0.0; 3];
            for c in 0..3 {
                let resid = radiance[c].ln_1p() - log_t[c];
                total += resid * resid;
                d_r[c] = 2.0 * resid / (n * (1.0 + radiance[c]));
            }
            for (s, (axis, d_theta, d_phi, lambda, eta)) in lobes.iter().enumerate() {
                let e = falloff[s];
                let weighted: f64 = (0..3).map(|c| d_r[c] * eta[c]).sum::<f64>() * e;
                let g = &mut grad[s * PARAMS_PER_LOBE..(s + 1) * PARAMS_PER_LOBE];
                let pull = (dir - axis) * *lambda;
                g[0] += weighted * pull.dot(d_theta);
                g[1] += weighted * pull.dot(d_phi);
                g[2] += weighted * (-0.5 * (dir - axis).norm_squared() * lambda);
                for c in 0..3 {
                    g[3 + c] += d_r[c] * eta[c] * e;
                }
            }
        }
        total / n
    }

    pub fn objective_value(&self, params: &[f64]) -> f64 {
        let mut g = vec![0.0; params.len()];
        self.objective(params, &mut g)
    }
}

/// Deterministic starting point: Fibonacci-spread axes over the target's
/// hemisphere, a shared sharpness, and the target's mean radiance.
pub fn default_init(target: &EnvMapGrid, num_lobes: usize, sharpness: f64) -> Result<SgEnvironment> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let count = target.texels().len() as f64;
    let mean = target.texels().iter().fold(Rgb::zeros(), |a, t| a + t) / count;
    let eta = mean.map(|c| c.max(MIN_INTENSITY));
    let lobes = (0..num_lobes)
        .map(|i| {
            let z = 1.0 - (i as f64 + 0.5) / num_lobes as f64;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let phi = i as f64 * golden;
            let local = Vec3::new(r * phi.cos(), r * phi.sin(), z);
            SgLobe::from_axis(&target.frame().to_world(&local), sharpness, eta)
        })
        .collect::<Result<Vec<_>>>()?;
    SgEnvironment::new(lobes)
}

/// Greedy starting point: each lobe sits on the brightest texel of what the
/// previous lobes leave unexplained.
pub fn peak_init(target: &EnvMapGrid, num_lobes: usize, sharpness: f64) -> Result<SgEnvironment> {
    let dirs = target.directions();
    let mut resid: Vec<Rgb> = target.texels().to_vec();
    let mut lobes = Vec::with_capacity(num_lobes);
    for _ in 0..num_lobes {
        let best = (0..resid.len())
            .max_by(|&a, &b| resid[a].sum().total_cmp(&resid[b].sum()))
            .unwrap_or(0);
        let eta = resid[best].map(|c| c.max(MIN_INTENSITY));
        let lobe = SgLobe::from_axis(&dirs[best], sharpness, eta)?;
        for (r, d) in resid.iter_mut().zip(&dirs) {
            *r = (*r - lobe.eval(d)?).map(|c| c.max(0.0));
        }
        lobes.push(lobe);
    }
    SgEnvironment::new(lobes)
}

/// Fibonacci start turned about the frame normal by half the golden angle.
fn rotated_init(target: &EnvMapGrid, num_lobes: usize, sharpness: f64) -> Result<SgEnvironment> {
    let base = default_init(target, num_lobes, sharpness)?;
    let turn = 0.5 * std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let frame = target.frame();
    let lobes = base
        .lobes()
        .iter()
        .map(|l| {
            let local = frame.to_local(&l.axis());
            let (c, s) = (turn.cos(), turn.sin());
            let rotated = Vec3::new(c * local.x - s * local.y, s * local.x + c * local.y, local.z);
            SgLobe::from_axis(&frame.to_world(&rotated), l.sharpness, l.intensity)
        })
        .collect::<Result<Vec<_>>>()?;
    SgEnvironment::new(lobes)
}

/// Fits `num_lobes` SG lobes to `target`.
///
/// The first start is `options.init` or [`default_init`]. With restarts
/// enabled, a start that ends above the target objective is followed by
/// [`peak_init`] and a rotated Fibonacci start while iterations remain; the
/// best run is returned and its report counts iterations across all starts.
///
/// A run that ends no better than its initialization is still returned; check
/// [`FitReport::reduced`] on the attached report.
pub fn sg_fit(target: &EnvMapGrid, num_lobes: usize, options: &SgFitOptions) -> Result<SgFitResult> {
    let problem = SgFitProblem::new(target, num_lobes)?;
    let first = match &options.init {
        Some(env) if env.len() != num_lobes => {
            return invalid(format!(
                "initial environment has {} lobes, expected {num_lobes}",
                env.len()
            ))
        }
        Some(env) => env.clone(),
        None => default_init(target, num_lobes, options.initial_sharpness)?,
    };
    let mut starts = vec![first];
    if options.restarts {
        starts.push(peak_init(target, num_lobes, options.initial_sharpness)?);
        starts.push(rotated_init(target, num_lobes, options.initial_sharpness)?);
    }

    let mut best: Option<(Vec<f64>, FitReport)> = None;
    let mut used = 0;
    let mut evaluations = 0;
    for start in starts {
        if used >= options.max_iters && best.is_some() {
            break;
        }
        let lbfgs = LbfgsOptions {
            max_iters: options.max_iters - used,
            target: options.target_objective,
            ..Default::default()
        };
        let (x, report) = minimize(|p, g| problem.objective(p, g), SgFitProblem::params_from_env(&start), &lbfgs);
        used += report.iterations;
        evaluations += report.evaluations;
        let better = best
            .as_ref()
            .is_none_or(|(_, b)| report.final_objective < b.final_objective);
        let done = report.final_objective <= options.target_objective;
        if better {
            best = Some((x, report));
        }
        if done {
            break;
        }
    }
    let (x, mut report) = best.expect("at least one start runs");
    report.iterations = used;
    report.evaluations = evaluations;
    Ok(SgFitResult {
        env: SgFitProblem::env_from_params(&x)?,
        report,
    })
}

//! Python bindings: lighting types, the rendering layer, fitting and metrics.
//!
//! Vectors and colours cross the boundary as 3-tuples and images as flat
//! lists, so the module has no numpy dependency.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use invrender::brdf;
use invrender::geometry;
use invrender::metrics;
use invrender::pipeline::{pipeline_demo, RunConfig};
use invrender::scene::generate_scene;
use invrender::sg_fit::{sg_fit, SgFitOptions};
use invrender::vsg::{self, Aabb, Ray, Voxel};
use invrender::{EnvMapGrid, Frame, Vec3};

type Triple = (f64, f64, f64);

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn v3(t: Triple) -> Vec3 {
    Vec3::new(t.0, t.1, t.2)
}

fn tup(v: &Vec3) -> Triple {
    (v.x, v.y, v.z)
}

fn frame(normal: Option<Triple>) -> PyResult<Frame> {
    match normal {
        Some(n) => Frame::from_normal(&v3(n).normalize()).map_err(err),
        None => Ok(Frame::default()),
    }
}

/// A single spherical Gaussian lobe.
#[pyclass(name = "SgLobe", skip_from_py_object)]
#[derive(Clone)]
struct PySgLobe(invrender::SgLobe);

#[pymethods]
impl PySgLobe {
    #[new]
    fn new(theta: f64, phi: f64, sharpness: f64, intensity: Triple) -> PyResult<Self> {
        invrender::SgLobe::new(theta, phi, sharpness, v3(intensity)).map(Self).map_err(err)
    }

    #[staticmethod]
    fn from_axis(axis: Triple, sharpness: f64, intensity: Triple) -> PyResult<Self> {
        invrender::SgLobe::from_axis(&v3(axis), sharpness, v3(intensity)).map(Self).map_err(err)
    }

    #[getter]
    fn theta(&self) -> f64 {
        self.0.theta
    }

    #[getter]
    fn phi(&self) -> f64 {
        self.0.phi
    }

    #[getter]
    fn sharpness(&self) -> f64 {
        self.0.sharpness
    }

    #[getter]
    fn intensity(&self) -> Triple {
        tup(&self.0.intensity)
    }

    fn axis(&self) -> Triple {
        tup(&self.0.axis())
    }

    fn eval(&self, direction: Triple) -> PyResult<Triple> {
        self.0.eval(&v3(direction)).map(|c| tup(&c)).map_err(err)
    }

    fn __repr__(&self) -> String {
        let l = &self.0;
        format!("SgLobe(theta={}, phi={}, sharpness={}, intensity={:?})", l.theta, l.phi, l.sharpness, tup(&l.intensity))
    }
}

/// A sum of spherical Gaussian lobes.
#[pyclass(name = "SgEnvironment", skip_from_py_object)]
#[derive(Clone)]
struct PySgEnvironment(invrender::SgEnvironment);

#[pymethods]
impl PySgEnvironment {
    #[new]
    fn new(lobes: Vec<PyRef<'_, PySgLobe>>) -> PyResult<Self> {
        invrender::SgEnvironment::new(lobes.iter().map(|l| l.0.clone()).collect())
            .map(Self)
            .map_err(err)
    }

    fn lobes(&self) -> Vec<PySgLobe> {
        self.0.lobes().iter().cloned().map(PySgLobe).collect()
    }

    fn eval(&self, direction: Triple) -> PyResult<Triple> {
        self.0.eval(&v3(direction)).map(|c| tup(&c)).map_err(err)
    }

    /// Rasterize onto a hemisphere grid around `normal` (default +z).
    #[pyo3(signature = (height, width, normal=None))]
    fn rasterize(&self, height: usize, width: usize, normal: Option<Triple>) -> PyResult<PyEnvMap> {
        self.0.rasterize(height, width, &frame(normal)?).map(PyEnvMap).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

/// A hemispherical environment map on an equirectangular grid.
#[pyclass(name = "EnvMap", skip_from_py_object)]
#[derive(Clone)]
struct PyEnvMap(EnvMapGrid);

#[pymethods]
impl PyEnvMap {
    /// Build from row-major texels, row 0 at the zenith.
    #[new]
    #[pyo3(signature = (height, width, texels, normal=None))]
    fn new(height: usize, width: usize, texels: Vec<Triple>, normal: Option<Triple>) -> PyResult<Self> {
        EnvMapGrid::from_texels(height, width, frame(normal)?, texels.into_iter().map(v3).collect())
            .map(Self)
            .map_err(err)
    }

    #[staticmethod]
    #[pyo3(signature = (height, width, value, normal=None))]
    fn constant(height: usize, width: usize, value: Triple, normal: Option<Triple>) -> PyResult<Self> {
        EnvMapGrid::constant(height, width, frame(normal)?, v3(value)).map(Self).map_err(err)
    }

    #[getter]
    fn height(&self) -> usize {
        self.0.height()
    }

    #[getter]
    fn width(&self) -> usize {
        self.0.width()
    }

    fn texels(&self) -> Vec<Triple> {
        self.0.texels().iter().map(tup).collect()
    }

    fn flat(&self) -> Vec<f64> {
        self.0.flat()
    }

    fn direction(&self, row: usize, col: usize) -> PyResult<Triple> {
        if row >= self.0.height() || col >= self.0.width() {
            return Err(err("texel index out of range"));
        }
        Ok(tup(&self.0.texel_direction(row, col)))
    }
}

/// A voxel grid of spherical Gaussians with opacity.
#[pyclass(name = "VsgVolume", skip_from_py_object)]
#[derive(Clone)]
struct PyVsgVolume(vsg::VsgVolume);

#[pymethods]
impl PyVsgVolume {
    /// A volume with every voxel set to the same isotropic emitter.
    #[staticmethod]
    fn uniform(dims: [usize; 3], lo: Triple, hi: Triple, alpha: f64, intensity: Triple) -> PyResult<Self> {
        let bounds = Aabb::new(v3(lo), v3(hi)).map_err(err)?;
        vsg::VsgVolume::uniform(dims, bounds, Voxel::emissive(alpha, v3(intensity)))
            .map(Self)
            .map_err(err)
    }

    #[getter]
    fn dims(&self) -> [usize; 3] {
        self.0.dims()
    }

    fn set_voxel(&mut self, index: [usize; 3], alpha: f64, intensity: Triple) -> PyResult<()> {
        let [x, y, z] = index;
        self.0.set_voxel(x, y, z, Voxel::emissive(alpha, v3(intensity))).map_err(err)
    }

    fn alphas(&self) -> Vec<f64> {
        self.0.voxels().iter().map(|v| v.alpha).collect()
    }

    #[pyo3(signature = (origin, direction, t_max, n_samples=64))]
    fn composite_ray(&self, origin: Triple, direction: Triple, t_max: f64, n_samples: usize) -> PyResult<Triple> {
        let ray = Ray::new(v3(origin), v3(direction).normalize(), t_max).map_err(err)?;
        self.0.composite_ray(&ray, n_samples).map(|c| tup(&c)).map_err(err)
    }

    #[pyo3(signature = (point, height, width, normal=None, n_samples=64))]
    fn extract_env_map(
        &self,
        point: Triple,
        height: usize,
        width: usize,
        normal: Option<Triple>,
        n_samples: usize,
    ) -> PyResult<PyEnvMap> {
        self.0
            .extract_env_map(&v3(point), &frame(normal)?, height, width, n_samples)
            .map(PyEnvMap)
            .map_err(err)
    }
}

/// Fit `num_lobes` lobes to a map; returns the environment and a fit summary.
#[pyfunction]
#[pyo3(signature = (target, num_lobes, max_iters=2000))]
fn fit_sg(target: PyRef<'_, PyEnvMap>, num_lobes: usize, max_iters: usize) -> PyResult<(PySgEnvironment, usize, f64)> {
    let opts = SgFitOptions {
        max_iters,
        ..SgFitOptions::default()
    };
    let fit = sg_fit(&target.0, num_lobes, &opts).map_err(err)?;
    Ok((PySgEnvironment(fit.env), fit.report.iterations, fit.report.final_objective))
}

#[pyfunction]
fn render_diffuse(albedo: Triple, env: PyRef<'_, PyEnvMap>) -> Triple {
    tup(&brdf::render_diffuse(&v3(albedo), &env.0))
}

#[pyfunction]
fn compositing_weights(alphas: Vec<f64>) -> Vec<f64> {
    vsg::compositing_weights(&alphas)
}

#[pyfunction]
fn projection_error(d: f64, z: f64) -> f64 {
    geometry::projection_error(d, z)
}

#[pyfunction]
fn multiview_weights(errors: Vec<f64>) -> PyResult<Vec<f64>> {
    geometry::multiview_weights(&errors, None).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (a, b, mask=None))]
fn l1_angular(a: Vec<f64>, b: Vec<f64>, mask: Option<Vec<f64>>) -> PyResult<f64> {
    metrics::masked_l1_angular(&a, &b, mask.as_deref()).map(|s| s.value).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (a, b, mask=None, channels=3))]
fn mse(a: Vec<f64>, b: Vec<f64>, mask: Option<Vec<f64>>, channels: usize) -> PyResult<f64> {
    metrics::masked_mse(&a, &b, mask.as_deref(), channels).map(|s| s.value).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (a, b, mask=None, channels=3))]
fn si_mse(a: Vec<f64>, b: Vec<f64>, mask: Option<Vec<f64>>, channels: usize) -> PyResult<f64> {
    metrics::si_mse(&a, &b, mask.as_deref(), channels).map(|s| s.value).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (a, b, mask=None, channels=3))]
fn si_log_mse(a: Vec<f64>, b: Vec<f64>, mask: Option<Vec<f64>>, channels: usize) -> PyResult<f64> {
    metrics::si_log_mse(&a, &b, mask.as_deref(), channels).map(|s| s.value).map_err(err)
}

#[pyfunction]
fn entropy_reg(values: Vec<f64>) -> PyResult<f64> {
    metrics::entropy_reg(&values).map(|s| s.value).map_err(err)
}

/// Generate the synthetic scene and run the full pipeline. `config` is the
/// same TOML accepted by the CLI; returns the report as a JSON string.
#[pyfunction]
#[pyo3(signature = (config=None))]
fn run_demo(py: Python<'_>, config: Option<&str>) -> PyResult<String> {
    let cfg: RunConfig = match config {
        Some(text) => toml::from_str(text).map_err(err)?,
        None => RunConfig::default(),
    };
    let report = py
        .detach(|| {
            let scene = generate_scene(&cfg.scene)?;
            pipeline_demo(&scene, &cfg.demo).map(|out| out.report)
        })
        .map_err(err)?;
    serde_json::to_string(&report).map_err(err)
}

#[pymodule]
pub fn invrender_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySgLobe>()?;
    m.add_class::<PySgEnvironment>()?;
    m.add_class::<PyEnvMap>()?;
    m.add_class::<PyVsgVolume>()?;
    m.add_function(wrap_pyfunction!(fit_sg, m)?)?;
    m.add_function(wrap_pyfunction!(render_diffuse, m)?)?;
    m.add_function(wrap_pyfunction!(compositing_weights, m)?)?;
    m.add_function(wrap_pyfunction!(projection_error, m)?)?;
    m.add_function(wrap_pyfunction!(multiview_weights, m)?)?;
    m.add_function(wrap_pyfunction!(l1_angular, m)?)?;
    m.add_function(wrap_pyfunction!(mse, m)?)?;
    m.add_function(wrap_pyfunction!(si_mse, m)?)?;
    m.add_function(wrap_pyfunction!(si_log_mse, m)?)?;
    m.add_function(wrap_pyfunction!(entropy_reg, m)?)?;
    m.add_function(wrap_pyfunction!(run_demo, m)?)?;
    Ok(())
}

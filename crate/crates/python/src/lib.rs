//! Python bindings: synthesis, reference building, registration,
//! enrollment, matching and identification.

use std::collections::BTreeMap;
use std::path::PathBuf;

use palmreg_core::config::{Config as CoreConfig, ConfigError};
use palmreg_core::geometry::RigidPose;
use palmreg_core::ght::ReferenceField;
use palmreg_core::image::{GrayImage, ImageError};
use palmreg_core::orientation::OrientationField;
use palmreg_core::pipeline::{enroll, reference_from_images, register_image};
use palmreg_core::synth::{self as core_synth, Perturbation, SynthSpec};
use palmreg_core::template::{identify as core_identify, match_templates, Gallery, PalmTemplate, TemplateError};
use pyo3::exceptions::{PyIOError, PyKeyError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn image_err(e: ImageError) -> PyErr {
    match e {
        ImageError::Io(io) => PyIOError::new_err(io.to_string()),
        e => value_err(e),
    }
}

fn template_err(e: TemplateError) -> PyErr {
    match e {
        TemplateError::Io { .. } => PyIOError::new_err(format!("{e}: {}", std::error::Error::source(&e).map(|s| s.to_string()).unwrap_or_default())),
        e => value_err(e),
    }
}

fn config_err(e: ConfigError) -> PyErr {
    match e {
        ConfigError::UnknownKey(_) => PyKeyError::new_err(e.to_string()),
        ConfigError::Io(_) => PyIOError::new_err(e.to_string()),
        e => value_err(e),
    }
}

/// 8-bit grayscale image.
#[pyclass(module = "palmreg", frozen)]
struct Image(GrayImage);

#[pymethods]
impl Image {
    #[new]
    fn new(width: usize, height: usize, pixels: &[u8]) -> PyResult<Self> {
        GrayImage::from_vec(width, height, pixels.to_vec()).map(Image).map_err(image_err)
    }

    #[staticmethod]
    fn read_pgm(path: PathBuf) -> PyResult<Self> {
        GrayImage::read_pgm(path).map(Image).map_err(image_err)
    }

    fn write_pgm(&self, path: PathBuf) -> PyResult<()> {
        self.0.write_pgm(path).map_err(image_err)
    }

    #[getter]
    fn width(&self) -> usize {
        self.0.width()
    }

    #[getter]
    fn height(&self) -> usize {
        self.0.height()
    }

    fn pixels<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, self.0.pixels())
    }

    fn flip_horizontal(&self) -> Self {
        Image(self.0.flip_horizontal())
    }

    fn __repr__(&self) -> String {
        format!("Image({}x{})", self.0.width(), self.0.height())
    }
}

/// Configuration; keys as in the `key = value` config file.
#[pyclass(module = "palmreg")]
#[derive(Default)]
struct Config(CoreConfig);

#[pymethods]
impl Config {
    #[new]
    #[pyo3(signature = (text = None))]
    fn new(text: Option<&str>) -> PyResult<Self> {
        match text {
            Some(t) => CoreConfig::parse(t).map(Config).map_err(config_err),
            None => Ok(Config::default()),
        }
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        CoreConfig::load(path).map(Config).map_err(config_err)
    }

    fn get(&self, key: &str) -> PyResult<String> {
        self.0.get(key).ok_or_else(|| PyKeyError::new_err(key.to_string()))
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.0.set(key, value).map_err(config_err)
    }

    fn to_text(&self) -> String {
        self.0.to_text()
    }
}

fn cfg_or_default(cfg: Option<&Config>) -> CoreConfig {
    cfg.map(|c| c.0.clone()).unwrap_or_default()
}

/// Reference orientation field (left hand).
#[pyclass(module = "palmreg", frozen)]
struct Reference(ReferenceField);

#[pymethods]
impl Reference {
    /// Averages the orientation fields of pre-aligned exemplar images.
    #[staticmethod]
    #[pyo3(signature = (images, config = None))]
    fn from_images(py: Python<'_>, images: Vec<PyRef<'_, Image>>, config: Option<&Config>) -> PyResult<Self> {
        let imgs: Vec<GrayImage> = images.iter().map(|i| i.0.clone()).collect();
        let cfg = cfg_or_default(config);
        py.detach(|| reference_from_images(&imgs, &cfg)).map(Reference).map_err(value_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let field = OrientationField::read_ofld(&path).map_err(value_err)?;
        ReferenceField::new(field).map(Reference).map_err(value_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.field().write_ofld(path).map_err(|e| PyIOError::new_err(e.to_string()))
    }

    /// `(cols, rows)` in 16 px blocks.
    #[getter]
    fn shape(&self) -> (usize, usize) {
        (self.0.field().cols(), self.0.field().rows())
    }
}

/// Enrolled palm: hand, registration class, pose and minutiae with
/// descriptors.
#[pyclass(module = "palmreg", frozen)]
struct Template(PalmTemplate);

#[pymethods]
impl Template {
    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        PalmTemplate::deserialize(data).map(Template).map_err(template_err)
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyBytes>> {
        let bytes = self.0.serialize().map_err(template_err)?;
        Ok(PyBytes::new(py, &bytes))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        PalmTemplate::load(path).map(Template).map_err(template_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(path).map_err(template_err)
    }

    #[getter]
    fn hand(&self) -> &'static str {
        self.0.hand.as_str()
    }

    #[getter]
    fn reg_class(&self) -> &'static str {
        self.0.reg_class.as_str()
    }

    /// `(theta_deg, dx, dy)` of the stored registration pose.
    #[getter]
    fn pose(&self) -> (f64, f64, f64) {
        (self.0.pose.theta_degrees(), self.0.pose.dx, self.0.pose.dy)
    }

    /// `(x, y, theta)` per minutia, in reference coordinates.
    fn minutiae(&self) -> Vec<(f64, f64, f64)> {
        self.0.minutiae.iter().map(|m| (m.x, m.y, m.theta)).collect()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn __repr__(&self) -> String {
        format!("Template({} minutiae, {}, {})", self.0.len(), self.0.hand.as_str(), self.0.reg_class.as_str())
    }
}

/// Renders a synthetic palm; returns `(image, truth_text)`.
#[pyfunction]
#[pyo3(signature = (seed, size = 2048, n_minutiae = 600, theta_deg = 0.0, dx = 0.0, dy = 0.0, mirrored = false, snr_db = None))]
#[allow(clippy::too_many_arguments)]
fn synth(py: Python<'_>, seed: u64, size: usize, n_minutiae: usize, theta_deg: f64, dx: f64, dy: f64, mirrored: bool, snr_db: Option<f64>) -> PyResult<(Image, String)> {
    if size < 64 {
        return Err(PyValueError::new_err("size must be at least 64"));
    }
    let spec = SynthSpec {
        seed,
        size,
        n_minutiae,
        pose: RigidPose::from_degrees(theta_deg, dx, dy),
        mirrored,
        noise_snr_db: snr_db,
        ..Default::default()
    };
    let palm = py.detach(|| core_synth::generate(&spec));
    let truth = core_synth::truth_text(&spec, &palm);
    Ok((Image(palm.image), truth))
}

/// Second impression: rigid motion, elastic jitter and noise.
#[pyfunction]
#[pyo3(signature = (image, seed = 0, theta_deg = 0.0, dx = 0.0, dy = 0.0, jitter_px = 0.0, snr_db = None))]
#[allow(clippy::too_many_arguments)]
fn perturb(py: Python<'_>, image: &Image, seed: u64, theta_deg: f64, dx: f64, dy: f64, jitter_px: f64, snr_db: Option<f64>) -> Image {
    let p = Perturbation {
        pose: RigidPose::from_degrees(theta_deg, dx, dy),
        jitter_px,
        noise_snr_db: snr_db,
        seed,
    };
    Image(py.detach(|| core_synth::perturb(&image.0, &p)))
}

/// Registers an image; returns a dict with `theta_deg`, `dx`, `dy`, `q1`,
/// `q2`, `hand`, `reg_class` and `mirrored`.
#[pyfunction]
#[pyo3(signature = (image, reference, config = None))]
fn register<'py>(py: Python<'py>, image: &Image, reference: &Reference, config: Option<&Config>) -> PyResult<Bound<'py, PyDict>> {
    let cfg = cfg_or_default(config);
    let reg = py
        .detach(|| register_image(&image.0, &reference.0, None, &cfg))
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    let d = PyDict::new(py);
    let p = reg.transform.pose;
    d.set_item("theta_deg", p.theta_degrees())?;
    d.set_item("dx", p.dx)?;
    d.set_item("dy", p.dy)?;
    d.set_item("q1", reg.q1())?;
    d.set_item("q2", reg.q2())?;
    d.set_item("hand", reg.hand.as_str())?;
    d.set_item("reg_class", reg.reg_class.as_str())?;
    d.set_item("mirrored", reg.transform.mirror)?;
    Ok(d)
}

/// Full enrollment of an image into a template.
#[pyfunction(name = "enroll")]
#[pyo3(signature = (image, reference, config = None))]
fn enroll_image(py: Python<'_>, image: &Image, reference: &Reference, config: Option<&Config>) -> PyResult<Template> {
    let cfg = cfg_or_default(config);
    py.detach(|| enroll(&image.0, &reference.0, None, &cfg))
        .map(|e| Template(e.template))
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// Similarity score in `[0, 1]`.
#[pyfunction(name = "match")]
#[pyo3(signature = (a, b, config = None))]
fn match_pair(py: Python<'_>, a: &Template, b: &Template, config: Option<&Config>) -> f64 {
    let cfg = cfg_or_default(config);
    py.detach(|| match_templates(&a.0, &b.0, &cfg.gates, &cfg.global))
}

/// Ranks `gallery` (id -> Template) against `probe`, best first.
#[pyfunction]
#[pyo3(signature = (probe, gallery, config = None))]
fn identify(py: Python<'_>, probe: &Template, gallery: BTreeMap<String, PyRef<'_, Template>>, config: Option<&Config>) -> PyResult<Vec<(String, f64)>> {
    let cfg = cfg_or_default(config);
    let mut g = Gallery::new();
    for (id, t) in &gallery {
        g.insert(id.clone(), t.0.clone()).map_err(template_err)?;
    }
    py.detach(|| core_identify(&probe.0, &g, &cfg.gates, &cfg.global))
        .map(|r| r.ranked)
        .map_err(template_err)
}

#[pymodule]
fn palmreg(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Image>()?;
    m.add_class::<Config>()?;
    m.add_class::<Reference>()?;
    m.add_class::<Template>()?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(perturb, m)?)?;
    m.add_function(wrap_pyfunction!(register, m)?)?;
    m.add_function(wrap_pyfunction!(enroll_image, m)?)?;
    m.add_function(wrap_pyfunction!(match_pair, m)?)?;
    m.add_function(wrap_pyfunction!(identify, m)?)?;
    Ok(())
}

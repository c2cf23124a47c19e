//! Python module `mtvif_py`. Images cross the boundary as flat row-major
//! lists in [0, 1] with an explicit `(height, width)`; RGB data is planar
//! (all red, then green, then blue).

use mtvif::datakit::{load_checkpoint, synth_scene as synth_one, SynthConfig};
use mtvif::diffcore::{ModelParams, Tensor};
use mtvif::fusemetrics::{ciede2000 as ciede, image_metrics, Lab, MetricParams};
use mtvif::mthnet::{ModelConfig, MultiTaskNet, ReferenceBackbone};
use mtvif::trainloop::projection;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn err(e: mtvif::Error) -> PyErr {
    match e {
        mtvif::Error::Config(_) | mtvif::Error::ShapeMismatch { .. } | mtvif::Error::InvalidArgument { .. } => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn rgb(data: Vec<f32>, h: usize, w: usize) -> PyResult<Tensor<f32>> {
    Tensor::new(&[1, 3, h, w], data).map_err(err)
}

/// One synthetic scene: dict with `vis`, `ir` (planar RGB), `labels`, `height`, `width`.
#[pyfunction]
#[pyo3(signature = (index, seed=1, size=64, classes=5))]
fn synth_scene(py: Python<'_>, index: u64, seed: u64, size: usize, classes: usize) -> PyResult<Py<PyDict>> {
    let cfg = SynthConfig { seed, size, classes, ..SynthConfig::default() };
    let p = synth_one(&cfg, index).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("id", &p.id)?;
    d.set_item("vis", p.vis.data().to_vec())?;
    d.set_item("ir", p.ir.data().to_vec())?;
    d.set_item("labels", p.labels.clone())?;
    d.set_item("height", p.height())?;
    d.set_item("width", p.width())?;
    Ok(d.unbind())
}

/// Multi-task fusion network with its parameters.
#[pyclass]
struct Model {
    net: MultiTaskNet<ReferenceBackbone>,
    params: ModelParams<f32>,
}

#[pymethods]
impl Model {
    /// Fresh model; `config_json` is a JSON model configuration (defaults when omitted).
    #[new]
    #[pyo3(signature = (config_json=None, seed=0))]
    fn new(config_json: Option<&str>, seed: u64) -> PyResult<Self> {
        let cfg: ModelConfig = match config_json {
            Some(s) => serde_json::from_str(s).map_err(|e| PyValueError::new_err(e.to_string()))?,
            None => ModelConfig::default(),
        };
        let net = MultiTaskNet::new(cfg).map_err(err)?;
        let params = net.init_params(seed).map_err(err)?;
        Ok(Self { net, params })
    }

    /// Model stored in a training checkpoint.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let ck = load_checkpoint(path.as_ref()).map_err(err)?;
        let model = ck
            .config
            .get("model")
            .cloned()
            .ok_or_else(|| PyValueError::new_err("checkpoint carries no model configuration"))?;
        let cfg: ModelConfig = serde_json::from_value(model).map_err(|e| PyValueError::new_err(e.to_string()))?;
        let net = MultiTaskNet::new(cfg).map_err(err)?;
        let mut params = net.init_params(0).map_err(err)?;
        params.assign_from(&ck.params).map_err(err)?;
        Ok(Self { net, params })
    }

    fn param_count(&self) -> usize {
        self.params.count(None)
    }

    fn config_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.net.cfg).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    /// Returns `(fused, labels)`: planar RGB fused image and per-pixel classes.
    fn infer(&self, vis: Vec<f32>, ir: Vec<f32>, height: usize, width: usize) -> PyResult<(Vec<f32>, Vec<u8>)> {
        let r = self.net.infer(&self.params, &rgb(vis, height, width)?, &rgb(ir, height, width)?).map_err(err)?;
        Ok((r.fused.data().to_vec(), r.labels))
    }
}

/// Fusion metrics of one RGB triple as a dict (EN, MI, VIF, Qabf, SSIM, MSS, dE).
#[pyfunction]
fn metrics(
    py: Python<'_>,
    fused: Vec<f32>,
    vis: Vec<f32>,
    ir: Vec<f32>,
    height: usize,
    width: usize,
) -> PyResult<Py<PyDict>> {
    let m = image_metrics(
        "py",
        &rgb(fused, height, width)?,
        &rgb(vis, height, width)?,
        &rgb(ir, height, width)?,
        &MetricParams::default(),
    )
    .map_err(err)?;
    let d = PyDict::new(py);
    for (k, v) in [
        ("EN", m.en),
        ("MI", m.mi),
        ("VIF", m.vif),
        ("Qabf", m.qabf),
        ("SSIM", m.ssim),
        ("MSS", m.mss),
        ("dE", m.delta_e),
    ] {
        d.set_item(k, v)?;
    }
    Ok(d.unbind())
}

/// CIEDE2000 difference of two (L, a, b) triples.
#[pyfunction]
fn ciede2000(a: (f64, f64, f64), b: (f64, f64, f64)) -> f64 {
    ciede(Lab { l: a.0, a: a.1, b: a.2 }, Lab { l: b.0, a: b.1, b: b.2 })
}

/// Scalar projections `(fus_on_seg, seg_on_fus, cosine)` of two gradients.
#[pyfunction]
fn grad_projection(g_fus: Vec<f64>, g_seg: Vec<f64>) -> PyResult<(f64, f64, f64)> {
    if g_fus.len() != g_seg.len() {
        return Err(PyValueError::new_err("gradients differ in length"));
    }
    let r = projection(0, &g_fus, &g_seg);
    Ok((r.proj_fus_on_seg, r.proj_seg_on_fus, r.cosine))
}

#[pymodule]
fn mtvif_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(synth_scene, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    m.add_function(wrap_pyfunction!(ciede2000, m)?)?;
    m.add_function(wrap_pyfunction!(grad_projection, m)?)?;
    Ok(())
}

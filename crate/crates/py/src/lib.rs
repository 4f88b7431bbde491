// SPDX-License-Identifier: MIT OR Apache-2.0

//! Python bindings. Heads are `(layer, head)` tuples, images flat
//! channel-major lists of `3 * image_size * image_size` floats, and
//! structured results plain dicts.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBool, PyDict, PyList, PyString};
use serde::Serialize;
use serde_json::Value;

use typolens::analysis;
use typolens::circuit::{self as circ, CircuitHead};
use typolens::datakit::{PlantedHead, PlantedRegion, RegionPlacement};
use typolens::probe::{self, ProbeConfig, ProbeTarget};
use typolens::tensor;
use typolens::{
    AlphaOverride, CaptureFlags, Circuit, ClassPrototypes, HeadId, InterventionSpec, PlantedConfig,
    SynthConfig, Tensor, VitWeights,
};

fn err(e: typolens::Error) -> PyErr {
    match e {
        typolens::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn json_to_py<'py>(py: Python<'py>, v: &Value) -> PyResult<Bound<'py, PyAny>> {
    Ok(match v {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => PyBool::new(py, *b).to_owned().into_any(),
        Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                i.into_pyobject(py)?.into_any()
            } else if let Some(u) = n.as_u64() {
                u.into_pyobject(py)?.into_any()
            } else {
                n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any()
            }
        }
        Value::String(s) => PyString::new(py, s).into_any(),
        Value::Array(items) => {
            let list = PyList::empty(py);
            for x in items {
                list.append(json_to_py(py, x)?)?;
            }
            list.into_any()
        }
        Value::Object(map) => {
            let d = PyDict::new(py);
            for (k, x) in map {
                d.set_item(k, json_to_py(py, x)?)?;
            }
            d.into_any()
        }
    })
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let v = serde_json::to_value(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    json_to_py(py, &v)
}

fn heads(list: &[(usize, usize)]) -> Vec<HeadId> {
    list.iter().map(|&(l, h)| HeadId::new(l, h)).collect()
}

fn circuit_of(list: &[(usize, usize)]) -> Circuit {
    Circuit {
        heads: list
            .iter()
            .map(|&(layer, head)| CircuitHead { layer, head, score: 0.0 })
            .collect(),
        ..Circuit::default()
    }
}

fn intervention(ablate: Option<Vec<(usize, usize)>>, alpha: Option<BTreeMap<(usize, usize), f32>>) -> InterventionSpec {
    let mut iv = InterventionSpec::ablate(heads(&ablate.unwrap_or_default()));
    if let Some(a) = alpha {
        iv = iv.with_alpha(AlphaOverride {
            alphas: a.into_iter().map(|((l, h), v)| (HeadId::new(l, h), v)).collect(),
        });
    }
    iv
}

// ---------------------------------------------------------------------------

/// ViT weights, plus the circuit from a sidecar when one was found.
#[pyclass(name = "Model", module = "typolens_py", skip_from_py_object)]
#[derive(Clone)]
pub struct PyModel {
    inner: VitWeights,
    circuit: Option<Circuit>,
}

impl PyModel {
    fn base(&self) -> InterventionSpec {
        self.circuit
            .as_ref()
            .map_or_else(InterventionSpec::none, Circuit::intervention)
    }

    fn with_base(&self, mut iv: InterventionSpec) -> InterventionSpec {
        iv.ablate.extend(self.base().ablate);
        iv
    }

    fn image(&self, pixels: Vec<f32>) -> PyResult<Tensor> {
        let s = self.inner.config.image_size;
        Tensor::new(vec![3, s, s], pixels).map_err(err)
    }
}

#[pymethods]
impl PyModel {
    /// Loads weights and applies `<stem>.circuit.json` when present.
    #[staticmethod]
    fn load(py: Python<'_>, path: PathBuf) -> PyResult<Self> {
        let m = py.detach(|| typolens::load_dyslexic(&path)).map_err(err)?;
        Ok(Self {
            inner: m.weights,
            circuit: m.circuit,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    #[getter]
    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.config)
    }

    #[getter]
    fn model_hash(&self) -> String {
        self.inner.model_hash()
    }

    /// Sidecar circuit heads, or `None`.
    #[getter]
    fn circuit(&self) -> Option<Vec<(usize, usize)>> {
        self.circuit
            .as_ref()
            .map(|c| c.heads.iter().map(|h| (h.layer, h.head)).collect())
    }

    /// Runs one image. `alpha` maps `(layer, head)` to a forced cls weight.
    #[pyo3(signature = (image, ablate=None, alpha=None))]
    fn forward<'py>(
        &self,
        py: Python<'py>,
        image: Vec<f32>,
        ablate: Option<Vec<(usize, usize)>>,
        alpha: Option<BTreeMap<(usize, usize), f32>>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let img = self.image(image)?;
        let iv = self.with_base(intervention(ablate, alpha));
        let t = py
            .detach(|| self.inner.forward(&img, &iv, CaptureFlags::attention()))
            .map_err(err)?;
        let out = PyDict::new(py);
        out.set_item("embedding", &t.final_cls_embedding)?;
        out.set_item("final_ln", &t.final_ln_cls)?;
        let att = PyDict::new(py);
        for h in self.inner.config.all_heads() {
            att.set_item((h.layer, h.head), t.cls_attention(h).map_err(err)?.to_vec())?;
        }
        out.set_item("cls_attention", att)?;
        Ok(out)
    }

    fn __repr__(&self) -> String {
        let c = &self.inner.config;
        format!(
            "Model(layers={}, heads={}, width={}, image_size={}, patch_size={})",
            c.layers, c.heads, c.width, c.image_size, c.patch_size
        )
    }
}

/// Images with their manifest.
#[pyclass(name = "Dataset", module = "typolens_py", skip_from_py_object)]
#[derive(Clone)]
pub struct PyDataset {
    inner: typolens::Dataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: typolens::Dataset::load(&path).map_err(err)?,
        })
    }

    /// Writes `<stem>.jsonl` and its image container under `dir`.
    fn save(&self, dir: PathBuf, stem: &str) -> PyResult<PathBuf> {
        self.inner.save(&dir, stem).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn image(&self, i: usize) -> PyResult<Vec<f32>> {
        self.inner
            .images
            .get(i)
            .map(|t| t.data().to_vec())
            .ok_or_else(|| PyValueError::new_err(format!("index {i} out of range")))
    }

    #[getter]
    fn entries<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.entries())
    }

    /// Class-balanced subset of about `fraction` of the samples.
    #[pyo3(signature = (fraction, seed=0))]
    fn balanced_subset(&self, fraction: f64, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: self.inner.balanced_subset(fraction, seed).map_err(err)?,
        })
    }
}

/// Text-side class embeddings for zero-shot scoring.
#[pyclass(name = "Prototypes", module = "typolens_py", skip_from_py_object)]
#[derive(Clone)]
pub struct PyPrototypes {
    inner: ClassPrototypes,
}

#[pymethods]
impl PyPrototypes {
    #[new]
    fn new(rows: Vec<Vec<f32>>, class_names: Vec<String>) -> PyResult<Self> {
        Ok(Self {
            inner: ClassPrototypes::new(&rows, class_names).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: ClassPrototypes::load(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    #[getter]
    fn classes(&self) -> usize {
        self.inner.classes()
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }
}

// ---------------------------------------------------------------------------

/// Returns `(clean, typo)`.
#[pyfunction]
#[pyo3(signature = (n=200, classes=6, typo_classes=6, image_size=32, patch_size=4, region="fixed-bottom", region_rows=1, noise=0.02, seed=0))]
#[allow(clippy::too_many_arguments)]
fn gen_synthetic_dataset(
    py: Python<'_>,
    n: usize,
    classes: usize,
    typo_classes: usize,
    image_size: usize,
    patch_size: usize,
    region: &str,
    region_rows: usize,
    noise: f32,
    seed: u64,
) -> PyResult<(PyDataset, PyDataset)> {
    let cfg = SynthConfig {
        n,
        classes,
        typo_classes,
        image_size,
        patch_size,
        region: region.parse::<RegionPlacement>().map_err(err)?,
        region_rows,
        noise,
        seed,
        ..SynthConfig::default()
    };
    let d = py.detach(|| typolens::gen_synthetic_dataset(&cfg)).map_err(err)?;
    Ok((PyDataset { inner: d.clean }, PyDataset { inner: d.typo }))
}

/// Returns `(model, prototypes)` with typographic heads planted at `planted`.
#[pyfunction]
#[pyo3(signature = (layers=2, heads=4, width=32, image_size=32, patch_size=4, classes=6, typo_classes=6, planted=vec![(1, 2)], seed=0))]
#[allow(clippy::too_many_arguments)]
fn gen_planted_model(
    py: Python<'_>,
    layers: usize,
    heads: usize,
    width: usize,
    image_size: usize,
    patch_size: usize,
    classes: usize,
    typo_classes: usize,
    planted: Vec<(usize, usize)>,
    seed: u64,
) -> PyResult<(PyModel, PyPrototypes)> {
    let cfg = PlantedConfig {
        layers,
        heads,
        width,
        image_size,
        patch_size,
        classes,
        typo_classes,
        planted: planted
            .iter()
            .map(|&(l, h)| PlantedHead {
                head: HeadId::new(l, h),
                region: PlantedRegion::Anywhere,
            })
            .collect(),
        seed,
        ..PlantedConfig::default()
    };
    let m = py.detach(|| typolens::gen_planted_model(&cfg)).map_err(err)?;
    Ok((
        PyModel {
            inner: m.weights,
            circuit: None,
        },
        PyPrototypes { inner: m.prototypes },
    ))
}

/// Per-head typographic attention scores as a `layers x heads` list.
#[pyfunction]
fn typo_attention_score(py: Python<'_>, model: &PyModel, data: &PyDataset) -> PyResult<Vec<Vec<f64>>> {
    let iv = model.base();
    let s = py
        .detach(|| typolens::score::typo_attention_score_with(&model.inner, &data.inner, &iv))
        .map_err(err)?;
    Ok(s.scores.chunks(s.heads.max(1)).map(<[f64]>::to_vec).collect())
}

/// Scores heads on `typo` and grows the circuit greedily against `control`.
#[pyfunction]
#[pyo3(signature = (model, typo, control, prototypes, epsilon=circ::DEFAULT_EPSILON))]
fn build_circuit<'py>(
    py: Python<'py>,
    model: &PyModel,
    typo: &PyDataset,
    control: &PyDataset,
    prototypes: &PyPrototypes,
    epsilon: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let b = py
        .detach(|| {
            let scores = typolens::typo_attention_score(&model.inner, &typo.inner)?;
            typolens::build_circuit(&model.inner, &scores, &control.inner, &prototypes.inner, epsilon)
        })
        .map_err(err)?;
    to_py(py, &b)
}

/// Zero-shot summary, optionally with heads ablated.
#[pyfunction]
#[pyo3(signature = (model, data, prototypes, ablate=None))]
fn zero_shot<'py>(
    py: Python<'py>,
    model: &PyModel,
    data: &PyDataset,
    prototypes: &PyPrototypes,
    ablate: Option<Vec<(usize, usize)>>,
) -> PyResult<Bound<'py, PyAny>> {
    let iv = model.with_base(intervention(ablate, None));
    let r = py
        .detach(|| typolens::zero_shot_classify(&model.inner, &iv, &data.inner, &prototypes.inner))
        .map_err(err)?;
    to_py(py, &r.summary)
}

#[pyfunction]
#[pyo3(signature = (model, circuit, data, prototypes, alphas=None))]
fn alpha_sweep<'py>(
    py: Python<'py>,
    model: &PyModel,
    circuit: Vec<(usize, usize)>,
    data: &PyDataset,
    prototypes: &PyPrototypes,
    alphas: Option<Vec<f32>>,
) -> PyResult<Bound<'py, PyAny>> {
    let c = circuit_of(&circuit);
    let grid = alphas.unwrap_or_else(circ::default_alpha_grid);
    let points = py
        .detach(|| typolens::alpha_sweep(&model.inner, &c, &data.inner, &prototypes.inner, &grid))
        .map_err(err)?;
    to_py(py, &points)
}

/// Writes the weights to `path` with a circuit sidecar; returns the sidecar path.
#[pyfunction]
fn export_dyslexic(model: &PyModel, circuit: Vec<(usize, usize)>, path: PathBuf) -> PyResult<PathBuf> {
    typolens::export_dyslexic(&model.inner, &circuit_of(&circuit), &path).map_err(err)
}

/// Held-out linear probe accuracy at every capture point.
#[pyfunction]
#[pyo3(signature = (model, data, target="typo", epochs=500, seed=0))]
fn probe_curve<'py>(
    py: Python<'py>,
    model: &PyModel,
    data: &PyDataset,
    target: &str,
    epochs: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let target: ProbeTarget = target.parse().map_err(err)?;
    let cfg = ProbeConfig {
        epochs,
        seed,
        ..ProbeConfig::default()
    };
    let curve = py
        .detach(|| probe::probe_curve(&model.inner, &data.inner, target, &cfg))
        .map_err(err)?;
    to_py(py, &curve)
}

#[pyfunction]
#[pyo3(signature = (model, data, threshold=analysis::DEFAULT_ID_THRESHOLD))]
fn id_curve<'py>(py: Python<'py>, model: &PyModel, data: &PyDataset, threshold: f64) -> PyResult<Bound<'py, PyAny>> {
    let c = py
        .detach(|| analysis::id_curve(&model.inner, &data.inner, threshold))
        .map_err(err)?;
    to_py(py, &c)
}

/// Spatial-norm detector report for one head (typo = positive).
#[pyfunction]
fn sink_report<'py>(
    py: Python<'py>,
    model: &PyModel,
    head: (usize, usize),
    clean: &PyDataset,
    typo: &PyDataset,
) -> PyResult<Bound<'py, PyAny>> {
    let h = HeadId::new(head.0, head.1);
    let r = py
        .detach(|| analysis::sink_report(&model.inner, h, &clean.inner, &typo.inner))
        .map_err(err)?;
    to_py(py, &r)
}

#[pyfunction]
fn roc_auc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    analysis::roc_auc(&scores, &labels).map_err(err)
}

/// Returns `(id, zero_variance, spectrum)`.
#[pyfunction]
#[pyo3(signature = (rows, threshold=analysis::DEFAULT_ID_THRESHOLD))]
fn intrinsic_dimensionality(rows: Vec<Vec<f32>>, threshold: f64) -> PyResult<(usize, bool, Vec<f64>)> {
    let x = Tensor::from_rows(&rows).map_err(err)?;
    let r = analysis::intrinsic_dimensionality(&x, threshold).map_err(err)?;
    Ok((r.id, r.zero_variance, r.spectrum))
}

#[pyfunction]
fn pca_spectrum(rows: Vec<Vec<f32>>) -> PyResult<Vec<f64>> {
    let x = Tensor::from_rows(&rows).map_err(err)?;
    tensor::pca_spectrum(&x).map_err(err)
}

#[pyfunction]
fn softmax_rows(rows: Vec<Vec<f32>>) -> PyResult<Vec<Vec<f32>>> {
    let x = Tensor::from_rows(&rows).map_err(err)?;
    let y = tensor::softmax_rows(&x).map_err(err)?;
    Ok((0..y.rows()).map(|i| y.row(i).to_vec()).collect())
}

#[pymodule]
fn typolens_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyPrototypes>()?;
    m.add_function(wrap_pyfunction!(gen_synthetic_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(gen_planted_model, m)?)?;
    m.add_function(wrap_pyfunction!(typo_attention_score, m)?)?;
    m.add_function(wrap_pyfunction!(build_circuit, m)?)?;
    m.add_function(wrap_pyfunction!(zero_shot, m)?)?;
    m.add_function(wrap_pyfunction!(alpha_sweep, m)?)?;
    m.add_function(wrap_pyfunction!(export_dyslexic, m)?)?;
    m.add_function(wrap_pyfunction!(probe_curve, m)?)?;
    m.add_function(wrap_pyfunction!(id_curve, m)?)?;
    m.add_function(wrap_pyfunction!(sink_report, m)?)?;
    m.add_function(wrap_pyfunction!(roc_auc, m)?)?;
    m.add_function(wrap_pyfunction!(intrinsic_dimensionality, m)?)?;
    m.add_function(wrap_pyfunction!(pca_spectrum, m)?)?;
    m.add_function(wrap_pyfunction!(softmax_rows, m)?)?;
    Ok(())
}

//! Python bindings. Matrices cross the boundary as lists of rows.

use std::path::PathBuf;

use gmn_core::evaluator::{domain_gap_diagnostic, evaluate_similarity, DomainGapConfig, RetrievalLabels};
use gmn_core::experiment::{prepare_data, run_evaluation, run_training};
use gmn_core::trainer::{load_checkpoint, save_checkpoint};
use gmn_core::{
    generate_synthetic, load_embeddings, save_embeddings, split_probe_gallery, Checkpoint, EmbeddingFormat,
    ErrorKind, EvalConfig, ExperimentConfig, GmnError, GmnModel, Matrix, PairOp, Protocol, SyntheticSpec,
};
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

/// `(epoch, lr, total_loss)`.
type EpochRow = (usize, f64, f64);
/// `(map, [(rank, cmc)], valid_probes)`.
type Metrics = (f64, Vec<(usize, f64)>, usize);

fn py_err(e: GmnError) -> PyErr {
    match e.kind() {
        ErrorKind::Config => PyValueError::new_err(e.to_string()),
        ErrorKind::Io => PyOSError::new_err(e.to_string()),
        ErrorKind::Data | ErrorKind::Numeric => PyRuntimeError::new_err(e.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    Matrix::from_rows(&rows).map_err(py_err)
}

fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    m.rows_iter().map(<[f64]>::to_vec).collect()
}

fn pair_op(name: &str) -> PyResult<PairOp> {
    name.parse().map_err(py_err)
}

fn protocol(name: &str) -> PyResult<Protocol> {
    name.parse().map_err(py_err)
}

/// Labelled embedding records.
#[pyclass(name = "Dataset", frozen)]
struct PyDataset {
    inner: gmn_core::Dataset,
}

#[pymethods]
impl PyDataset {
    /// Synthetic multi-domain data; unset arguments keep the preset values.
    #[staticmethod]
    #[pyo3(signature = (num_domains=None, identities_per_domain=None, records_per_identity=None, d_in=None, noise_scale=None, domain_shift_scale=None, seed=0))]
    fn synthetic(
        num_domains: Option<usize>,
        identities_per_domain: Option<usize>,
        records_per_identity: Option<usize>,
        d_in: Option<usize>,
        noise_scale: Option<f64>,
        domain_shift_scale: Option<f64>,
        seed: u64,
    ) -> PyResult<Self> {
        let d = SyntheticSpec::default();
        let spec = SyntheticSpec {
            num_domains: num_domains.unwrap_or(d.num_domains),
            identities_per_domain: identities_per_domain.unwrap_or(d.identities_per_domain),
            records_per_identity: records_per_identity.unwrap_or(d.records_per_identity),
            d_in: d_in.unwrap_or(d.d_in),
            noise_scale: noise_scale.unwrap_or(d.noise_scale),
            domain_shift_scale: domain_shift_scale.unwrap_or(d.domain_shift_scale),
            seed,
            ..d
        };
        Ok(PyDataset {
            inner: generate_synthetic(&spec).map_err(py_err)?,
        })
    }

    /// Text (`.csv`) or binary (`.bin`, `.gmne`) embedding file.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let fmt = EmbeddingFormat::from_path(&path);
        Ok(PyDataset {
            inner: load_embeddings(&path, fmt).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_embeddings(&self.inner, &path, EmbeddingFormat::from_path(&path)).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(records={}, d_in={}, identities={}, domains={})",
            self.inner.len(),
            self.inner.d_in(),
            self.inner.num_identities(),
            self.inner.num_domains()
        )
    }

    #[getter]
    fn d_in(&self) -> usize {
        self.inner.d_in()
    }

    #[getter]
    fn identities(&self) -> Vec<u32> {
        self.inner.records().iter().map(|r| r.identity).collect()
    }

    #[getter]
    fn domains(&self) -> Vec<u32> {
        self.inner.records().iter().map(|r| r.domain).collect()
    }

    #[getter]
    fn cameras(&self) -> Vec<u32> {
        self.inner.records().iter().map(|r| r.camera).collect()
    }

    #[getter]
    fn embeddings(&self) -> Vec<Vec<f64>> {
        rows(&self.inner.embedding_matrix())
    }

    fn select_domains(&self, domains: Vec<u32>) -> PyResult<Self> {
        Ok(PyDataset {
            inner: self.inner.select_domains(&domains, self.inner.role()).map_err(py_err)?,
        })
    }

    /// Splits every identity between a probe and a gallery set.
    #[pyo3(signature = (probe_fraction=0.2, seed=0))]
    fn split(&self, probe_fraction: f64, seed: u64) -> PyResult<(Self, Self)> {
        let (p, g) = split_probe_gallery(&self.inner, probe_fraction, seed).map_err(py_err)?;
        Ok((PyDataset { inner: p }, PyDataset { inner: g }))
    }

    /// Linear domain classifier accuracy on instance and pair features.
    #[pyo3(signature = (seed=0))]
    fn domain_gap(&self, seed: u64) -> PyResult<(f64, f64, f64)> {
        let cfg = DomainGapConfig {
            seed,
            ..DomainGapConfig::default()
        };
        let r = domain_gap_diagnostic(&self.inner, &cfg).map_err(py_err)?;
        Ok((r.instance_space_accuracy, r.pair_space_accuracy, r.chance_level))
    }
}

/// Experiment configuration: TOML text plus `section.field=value` overrides.
#[pyclass(name = "Config", frozen)]
struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (toml=None, overrides=Vec::new()))]
    fn new(toml: Option<&str>, overrides: Vec<String>) -> PyResult<Self> {
        Ok(PyConfig {
            inner: ExperimentConfig::load_str(toml, &overrides).map_err(py_err)?,
        })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    /// Train, probe and gallery sets described by the config.
    fn data(&self) -> PyResult<(PyDataset, PyDataset, PyDataset)> {
        let d = prepare_data(&self.inner).map_err(py_err)?;
        Ok((
            PyDataset { inner: d.train },
            PyDataset { inner: d.probe },
            PyDataset { inner: d.gallery },
        ))
    }
}

#[pyclass(name = "EvalReport", frozen)]
struct PyEvalReport {
    #[pyo3(get)]
    protocol: String,
    #[pyo3(get)]
    map: f64,
    #[pyo3(get)]
    cmc: Vec<(usize, f64)>,
    #[pyo3(get)]
    num_valid_probes: usize,
    #[pyo3(get)]
    num_skipped_probes: usize,
}

#[pymethods]
impl PyEvalReport {
    fn __repr__(&self) -> String {
        format!("EvalReport(protocol={}, map={:.4}, cmc={:?})", self.protocol, self.map, self.cmc)
    }
}

/// Encoder with an optional metric network.
#[pyclass(name = "Model", frozen)]
struct PyModel {
    inner: GmnModel,
}

#[pymethods]
impl PyModel {
    /// Reads either checkpoint kind.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel {
            inner: load_checkpoint(&path).map_err(py_err)?.model().clone(),
        })
    }

    /// Writes a model-only checkpoint.
    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&Checkpoint::Model(self.inner.clone()), &path).map_err(py_err)
    }

    #[getter]
    fn has_metric_net(&self) -> bool {
        self.inner.metric_net.is_some()
    }

    #[getter]
    fn embedding_dim(&self) -> usize {
        self.inner.encoder.embedding_dim()
    }

    fn embed(&self, inputs: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&self.inner.embed(&matrix(inputs)?).map_err(py_err)?))
    }

    /// Metric-network similarity between every probe and gallery embedding.
    #[pyo3(signature = (probe, gallery, pair_op="squared_diff", tile_size=256))]
    fn similarity_matrix(
        &self,
        py: Python<'_>,
        probe: Vec<Vec<f64>>,
        gallery: Vec<Vec<f64>>,
        pair_op: &str,
        tile_size: usize,
    ) -> PyResult<Vec<Vec<f64>>> {
        let net = self
            .inner
            .metric_net
            .as_ref()
            .ok_or_else(|| PyValueError::new_err("model has no metric network"))?;
        let (p, g, op) = (matrix(probe)?, matrix(gallery)?, self::pair_op(pair_op)?);
        let s = py
            .detach(|| gmn_core::similarity_matrix(net, &p, &g, op, tile_size))
            .map_err(py_err)?;
        Ok(rows(&s))
    }

    /// Evaluates on a probe and gallery set; protocols default to every one the model supports.
    #[pyo3(signature = (probe, gallery, protocols=None))]
    fn evaluate(
        &self,
        py: Python<'_>,
        probe: PyRef<'_, PyDataset>,
        gallery: PyRef<'_, PyDataset>,
        protocols: Option<Vec<String>>,
    ) -> PyResult<Vec<PyEvalReport>> {
        let list = protocols
            .map(|v| v.iter().map(|s| protocol(s)).collect::<PyResult<Vec<_>>>())
            .transpose()?;
        let (p, g) = (&probe.inner, &gallery.inner);
        let reports = py
            .detach(|| run_evaluation(&EvalConfig::default(), &self.inner, p, g, list.as_deref()))
            .map_err(py_err)?;
        Ok(reports
            .into_iter()
            .map(|r| PyEvalReport {
                protocol: r.protocol.as_str().to_string(),
                map: r.map,
                cmc: r.cmc,
                num_valid_probes: r.num_valid_probes,
                num_skipped_probes: r.num_skipped_probes,
            })
            .collect())
    }
}

/// Trains under `config` on its training set. Returns the model and one
/// `(epoch, lr, total_loss)` row per epoch.
#[pyfunction]
#[pyo3(signature = (config, out_dir=None))]
fn train(py: Python<'_>, config: PyRef<'_, PyConfig>, out_dir: Option<PathBuf>) -> PyResult<(PyModel, Vec<EpochRow>)> {
    let cfg = &config.inner;
    let (state, logs) = py
        .detach(|| {
            let data = prepare_data(cfg)?;
            run_training(cfg, &data.train, out_dir.as_deref(), None, None)
        })
        .map_err(py_err)?;
    let history = logs
        .iter()
        .map(|l| (l.record.epoch, l.record.lr, l.record.losses.total))
        .collect();
    Ok((PyModel { inner: state.model }, history))
}

/// Pair feature of two vectors under `op` (squared_diff, abs, mul, add).
#[pyfunction]
#[pyo3(signature = (x, y, op="squared_diff"))]
fn pair_feature(x: Vec<f64>, y: Vec<f64>, op: &str) -> PyResult<Vec<f64>> {
    gmn_core::pair_feature(&x, &y, pair_op(op)?).map_err(py_err)
}

/// Positive-class probability from the two metric-net logits.
#[pyfunction]
fn similarity(z_neg: f64, z_pos: f64) -> PyResult<f64> {
    gmn_core::similarity(z_neg, z_pos).map_err(py_err)
}

/// mAP and CMC for a score matrix. Returns `(map, [(rank, cmc)], valid_probes)`.
#[pyfunction]
#[pyo3(signature = (scores, probe_ids, probe_cams, gallery_ids, gallery_cams, cross_camera_filter=true, ranks=vec![1, 5, 10]))]
#[allow(clippy::too_many_arguments)]
fn ranking_metrics(
    scores: Vec<Vec<f64>>,
    probe_ids: Vec<u32>,
    probe_cams: Vec<u32>,
    gallery_ids: Vec<u32>,
    gallery_cams: Vec<u32>,
    cross_camera_filter: bool,
    ranks: Vec<usize>,
) -> PyResult<Metrics> {
    let probe = RetrievalLabels {
        identities: probe_ids,
        cameras: probe_cams,
    };
    let gallery = RetrievalLabels {
        identities: gallery_ids,
        cameras: gallery_cams,
    };
    let m = evaluate_similarity(&matrix(scores)?, &probe, &gallery, cross_camera_filter, &ranks).map_err(py_err)?;
    Ok((m.map, m.cmc, m.num_valid_probes))
}

#[pymodule]
fn gmn(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyEvalReport>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(pair_feature, m)?)?;
    m.add_function(wrap_pyfunction!(similarity, m)?)?;
    m.add_function(wrap_pyfunction!(ranking_metrics, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}

//! Python bindings. Built as the `segmentor` extension module.

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use segmentor::dataset;
use segmentor::{dbscan, evalgen, forest, pipeline, tsne};
use segmentor::{DbscanConfig, Error, ForestConfig, MaxFeatures, PipelineConfig, TsneConfig};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::Numerical(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn from_json<'py>(py: Python<'py>, value: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let s = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (s,))
}

/// Numeric matrix with feature names and row ids.
#[pyclass(name = "Dataset", frozen)]
struct PyDataset {
    inner: segmentor::Dataset,
}

#[pymethods]
impl PyDataset {
    #[new]
    #[pyo3(signature = (rows, feature_names=None))]
    fn new(rows: Vec<Vec<f64>>, feature_names: Option<Vec<String>>) -> PyResult<Self> {
        let n_features = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n_features) {
            return Err(PyValueError::new_err("rows must all have the same length"));
        }
        let inner = segmentor::Dataset::new(rows.concat(), n_features, feature_names, None).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[getter]
    fn n_points(&self) -> usize {
        self.inner.n_points()
    }

    #[getter]
    fn n_features(&self) -> usize {
        self.inner.n_features()
    }

    #[getter]
    fn feature_names(&self) -> Vec<String> {
        self.inner.feature_names().to_vec()
    }

    fn to_list(&self) -> Vec<Vec<f64>> {
        self.inner.rows().map(<[f64]>::to_vec).collect()
    }

    fn __len__(&self) -> usize {
        self.inner.n_points()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset({} rows x {} features)",
            self.inner.n_points(),
            self.inner.n_features()
        )
    }
}

/// Loads a numeric CSV; the header is detected when `has_header` is None.
#[pyfunction]
#[pyo3(signature = (path, has_header=None))]
fn load_csv(path: &str, has_header: Option<bool>) -> PyResult<PyDataset> {
    let header = match has_header {
        Some(h) => h,
        None => dataset::sniff_header(path).map_err(to_py)?,
    };
    Ok(PyDataset {
        inner: dataset::load_csv(path, header).map_err(to_py)?,
    })
}

#[pyfunction]
fn standardize(data: &PyDataset) -> PyDataset {
    PyDataset {
        inner: dataset::standardize(&data.inner),
    }
}

#[allow(clippy::too_many_arguments)]
fn pipeline_config(
    seed: u64,
    perplexity: f64,
    n_iterations: usize,
    late_exaggeration: f64,
    epsilon_constant: f64,
    min_pts: usize,
    n_trees: usize,
    max_features: &str,
    standardize: bool,
) -> PyResult<PipelineConfig> {
    let base = PipelineConfig::default().with_seed(seed);
    Ok(PipelineConfig {
        tsne: TsneConfig {
            perplexity,
            late_exaggeration_factor: late_exaggeration,
            seed: base.tsne.seed,
            ..Default::default()
        }
        .with_iterations(n_iterations),
        dbscan: DbscanConfig {
            epsilon_constant,
            min_pts,
            ..Default::default()
        },
        forest: ForestConfig {
            n_trees,
            max_features: max_features.parse::<MaxFeatures>().map_err(to_py)?,
            seed: base.forest.seed,
            ..Default::default()
        },
        standardize_input: standardize,
    })
}

/// Output of `segment`.
#[pyclass(name = "SegmentationResult", frozen)]
struct PySegmentation {
    inner: segmentor::SegmentationResult,
}

#[pymethods]
impl PySegmentation {
    #[getter]
    fn labels(&self) -> Vec<usize> {
        self.inner.assignment.labels.clone()
    }

    #[getter]
    fn cluster_sizes(&self) -> Vec<usize> {
        self.inner.assignment.cluster_sizes.clone()
    }

    #[getter]
    fn epsilon(&self) -> f64 {
        self.inner.assignment.epsilon_used
    }

    #[getter]
    fn embedding(&self) -> Vec<(f64, f64)> {
        self.inner.embedding.coords.iter().map(|&[x, y]| (x, y)).collect()
    }

    #[getter]
    fn kl_divergence(&self) -> f64 {
        self.inner.embedding.final_kl
    }

    /// (feature name, importance) pairs, most important first.
    fn importances(&self) -> Vec<(String, f64)> {
        forest::feature_importances(&self.inner.model)
    }

    /// Cluster labels for new rows in the original input units.
    fn predict(&self, data: &PyDataset) -> PyResult<Vec<usize>> {
        self.inner.predict(&data.inner).map_err(to_py)
    }

    fn profiles_csv(&self) -> String {
        self.inner.profiles.to_csv()
    }

    fn model_json(&self) -> String {
        self.inner.model.to_json()
    }
}

#[pyfunction]
#[pyo3(signature = (
    data, seed=0, perplexity=30.0, n_iterations=1000, late_exaggeration=1.0,
    epsilon_constant=0.1, min_pts=4, n_trees=100, max_features="sqrt", standardize=true
))]
#[allow(clippy::too_many_arguments)]
fn segment(
    py: Python<'_>,
    data: &PyDataset,
    seed: u64,
    perplexity: f64,
    n_iterations: usize,
    late_exaggeration: f64,
    epsilon_constant: f64,
    min_pts: usize,
    n_trees: usize,
    max_features: &str,
    standardize: bool,
) -> PyResult<PySegmentation> {
    let cfg = pipeline_config(
        seed,
        perplexity,
        n_iterations,
        late_exaggeration,
        epsilon_constant,
        min_pts,
        n_trees,
        max_features,
        standardize,
    )?;
    let d = data.inner.clone();
    let inner = py.detach(move || pipeline::segment(&d, &cfg)).map_err(to_py)?;
    Ok(PySegmentation { inner })
}

/// Exact t-SNE of the rows as they are (no standardization).
#[pyfunction]
#[pyo3(signature = (data, perplexity=30.0, n_iterations=1000, late_exaggeration=1.0, seed=0))]
fn embed(
    py: Python<'_>,
    data: &PyDataset,
    perplexity: f64,
    n_iterations: usize,
    late_exaggeration: f64,
    seed: u64,
) -> PyResult<Vec<(f64, f64)>> {
    let cfg = TsneConfig {
        perplexity,
        late_exaggeration_factor: late_exaggeration,
        seed,
        ..Default::default()
    }
    .with_iterations(n_iterations);
    let d = data.inner.clone();
    let e = py.detach(move || tsne::embed(&d, &cfg)).map_err(to_py)?;
    Ok(e.coords.iter().map(|&[x, y]| (x, y)).collect())
}

/// DBSCAN on 2-D points with epsilon = constant x mean pairwise distance.
/// Labels are ordered by cluster size; noise points become singletons.
#[pyfunction]
#[pyo3(signature = (coords, epsilon_constant=0.1, min_pts=4))]
fn cluster(coords: Vec<(f64, f64)>, epsilon_constant: f64, min_pts: usize) -> PyResult<Vec<usize>> {
    let pts: Vec<[f64; 2]> = coords.into_iter().map(|(x, y)| [x, y]).collect();
    let cfg = DbscanConfig {
        epsilon_constant,
        min_pts,
        ..Default::default()
    };
    Ok(dbscan::cluster_coords(&pts, &cfg).map_err(to_py)?.labels)
}

/// Returns (accuracy, precision, recall, f1), support-weighted.
#[pyfunction]
fn weighted_metrics(y_true: Vec<i64>, y_pred: Vec<i64>) -> PyResult<(f64, f64, f64, f64)> {
    let m = evalgen::weighted_metrics(&y_true, &y_pred).map_err(to_py)?;
    Ok((m.accuracy, m.precision_weighted, m.recall_weighted, m.f1_weighted))
}

/// Greedy matching of training clusters (lists of row indices) to
/// full-data clusters; None marks an unmatched training cluster.
#[pyfunction]
fn match_clusters(train: Vec<Vec<usize>>, full: Vec<Vec<usize>>) -> Vec<Option<usize>> {
    evalgen::match_clusters(&train, &full).best_perm
}

/// k-fold generalization report as a dict.
#[pyfunction]
#[pyo3(signature = (data, k=5, grid=None, min_clusters=1, seed=0, standardize=true))]
fn generalization_run<'py>(
    py: Python<'py>,
    data: &PyDataset,
    k: usize,
    grid: Option<Vec<f64>>,
    min_clusters: usize,
    seed: u64,
    standardize: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = PipelineConfig {
        standardize_input: standardize,
        ..Default::default()
    }
    .with_seed(seed);
    let grid = grid.unwrap_or_else(evalgen::default_grid);
    let fold_seed = segmentor::seed::derive(seed, "folds");
    let d = data.inner.clone();
    let report = py
        .detach(move || evalgen::generalization_run(&d, &cfg, k, &grid, min_clusters, fold_seed))
        .map_err(to_py)?;
    from_json(py, &report)
}

#[pymodule]
#[pyo3(name = "segmentor")]
fn segmentor_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PySegmentation>()?;
    m.add_function(wrap_pyfunction!(load_csv, m)?)?;
    m.add_function(wrap_pyfunction!(standardize, m)?)?;
    m.add_function(wrap_pyfunction!(segment, m)?)?;
    m.add_function(wrap_pyfunction!(embed, m)?)?;
    m.add_function(wrap_pyfunction!(cluster, m)?)?;
    m.add_function(wrap_pyfunction!(weighted_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(match_clusters, m)?)?;
    m.add_function(wrap_pyfunction!(generalization_run, m)?)?;
    Ok(())
}

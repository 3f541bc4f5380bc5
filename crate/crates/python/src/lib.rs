//! Python bindings for the reconstruction library.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use superiorgat::baselines::{linear_interp, nearest_neighbor_sub, NnMode, DEFAULT_AZIMUTH_BINS};
use superiorgat::experiment::{ExperimentConfig, Method};
use superiorgat::graph::{build_knn_graph, KnnSpace};
use superiorgat::ingest::{apply_beam_dropout, DropoutPattern, PointCloud, RawPoint};
use superiorgat::metrics::{evaluate, z_only_points, ChamferScope, EvalReport, RunInfo};
use superiorgat::model::ModelConfig;
use superiorgat::synth::{synthesize_scene, SceneKind, SyntheticSceneSpec};
use superiorgat::trainer::{predict_dropped, train_frame, TrainConfig};
use superiorgat::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::TruncatedRecord { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn parse_enum<T: clap::ValueEnum>(name: &str) -> PyResult<T> {
    T::from_str(&name.replace('_', "-"), true).map_err(PyValueError::new_err)
}

fn report_dict<'py>(py: Python<'py>, r: &EvalReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("frame", &r.frame)?;
    d.set_item("method", &r.method)?;
    d.set_item("k", r.k)?;
    d.set_item("rmse_z", r.rmse_z)?;
    d.set_item("rmse_xyz", r.rmse_xyz)?;
    d.set_item("chamfer", r.chamfer)?;
    d.set_item("train_s", r.train_s)?;
    d.set_item("infer_s", r.infer_s)?;
    d.set_item("n_dropped", r.n_dropped)?;
    Ok(d)
}

/// Default experiment config as TOML.
#[pyfunction]
fn default_config() -> PyResult<String> {
    ExperimentConfig::default().to_toml().map_err(py_err)
}

/// Runs an experiment described by a TOML string; returns one dict per run.
#[pyfunction]
fn run_experiment<'py>(py: Python<'py>, config_toml: &str) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let cfg = ExperimentConfig::from_toml(config_toml).map_err(py_err)?;
    let summary = py
        .detach(|| superiorgat::experiment::run_experiment(&cfg))
        .map_err(py_err)?;
    summary.reports.iter().map(|r| report_dict(py, r)).collect()
}

/// Reads a KITTI velodyne frame as `(x, y, z, reflectance)` tuples.
#[pyfunction]
fn read_kitti_bin(path: &str) -> PyResult<Vec<(f64, f64, f64, f64)>> {
    let read = superiorgat::ingest::read_kitti_bin(path).map_err(py_err)?;
    Ok(read.cloud.points.iter().map(|p| (p.x, p.y, p.z, p.r)).collect())
}

/// Simulated scan; returns `(points, beams)`.
#[pyfunction]
#[pyo3(signature = (kind="sinusoidal", points=4000, seed=0, noise=0.0, fov=360.0))]
fn synthesize(
    kind: &str,
    points: usize,
    seed: u64,
    noise: f64,
    fov: f64,
) -> PyResult<(Vec<(f64, f64, f64)>, Vec<usize>)> {
    let spec = SyntheticSceneSpec {
        kind: parse_enum::<SceneKind>(kind)?,
        points,
        seed,
        noise_sigma: noise,
        fov_deg: fov,
        ..SyntheticSceneSpec::default()
    };
    let cloud = synthesize_scene(&spec).map_err(py_err)?;
    let beams = cloud.beams().map(<[usize]>::to_vec).unwrap_or_default();
    Ok((cloud.points.iter().map(|p| (p.x, p.y, p.z)).collect(), beams))
}

/// Drops every `dropout_nth` beam of the given points, reconstructs the
/// hidden z with `method` and scores the result.
#[pyfunction]
#[pyo3(signature = (points, beams, num_beams=64, method="superior_gat", k=10, epochs=200, seed=0, dropout_nth=4))]
#[allow(clippy::too_many_arguments)]
fn reconstruct<'py>(
    py: Python<'py>,
    points: Vec<(f64, f64, f64)>,
    beams: Vec<usize>,
    num_beams: usize,
    method: &str,
    k: usize,
    epochs: usize,
    seed: u64,
    dropout_nth: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let method: Method = parse_enum(method)?;
    let pts = points.iter().map(|&(x, y, z)| RawPoint::new(x, y, z, 0.0)).collect();
    let cloud = PointCloud::with_beams(pts, beams, num_beams).map_err(py_err)?;
    let pattern = DropoutPattern::EveryNth { n: dropout_nth, offset: 0 };
    let frame = apply_beam_dropout(&cloud, pattern).map_err(py_err)?;
    let run = || -> superiorgat::Result<(Vec<[f64; 3]>, EvalReport)> {
        let graph = build_knn_graph(&frame, k, KnnSpace::Planar)?;
        let rec = match method.architecture() {
            None if method == Method::Linear => {
                z_only_points(&frame, &linear_interp(&frame, DEFAULT_AZIMUTH_BINS)?)?
            }
            None => nearest_neighbor_sub(&frame, NnMode::FullXyz)?,
            Some(arch) => {
                let tc = TrainConfig { epochs, seed, ..TrainConfig::default() };
                let out = train_frame(&frame, &graph, &ModelConfig::new(arch), &tc)?;
                z_only_points(&frame, &predict_dropped(&frame, &graph, &out.params)?.0)?
            }
        };
        let info = RunInfo {
            method: method.tag().to_string(),
            k,
            ..RunInfo::default()
        };
        let report = evaluate(&frame, &rec, info, ChamferScope::Dropped)?;
        Ok((rec, report))
    };
    let (rec, report) = py.detach(run).map_err(py_err)?;
    let d = report_dict(py, &report)?;
    let dropped = frame.dropped_indices();
    d.set_item("z_true", dropped.iter().map(|&i| frame.z_truth()[i]).collect::<Vec<_>>())?;
    d.set_item("indices", dropped)?;
    d.set_item("predicted", rec.iter().map(|p| (p[0], p[1], p[2])).collect::<Vec<_>>())?;
    Ok(d)
}

#[pymodule]
fn superiorgat_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(read_kitti_bin, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    m.add_function(wrap_pyfunction!(reconstruct, m)?)?;
    Ok(())
}

//! Python bindings. Poses are lists of `[x, y]` or `[x, y, z]` rows and
//! images are flat row-major lists of floats in `[0, 1]`.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use selfpose::evaluation::{self, predict_pixels};
use selfpose::geometry::{self, GeometryConfig, RotationMatrix, RotationSpec};
use selfpose::networks::{Checkpoint, Model, NetworkConfig};
use selfpose::renderer::{self, RenderConfig};
use selfpose::skeleton::{Pose2D, Pose3D, SkeletonTopology};
use selfpose::synthetic::{build_prior, QuadrupedParams};
use selfpose::training::{fit, TrainConfig, TrainData, TrainState};
use selfpose::Error;

fn err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::Diverged { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn pose2d(rows: Vec<[f64; 2]>) -> PyResult<Pose2D> {
    Pose2D::new(rows).map_err(err)
}

fn pose3d(rows: Vec<[f64; 3]>) -> PyResult<Pose3D> {
    Pose3D::new(rows).map_err(err)
}

/// Joint names, bones and evaluation subset of a skeleton.
#[pyclass(name = "Topology", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyTopology {
    inner: SkeletonTopology,
}

#[pymethods]
impl PyTopology {
    /// The built-in 20-joint quadruped.
    #[staticmethod]
    fn quadruped() -> Self {
        Self {
            inner: SkeletonTopology::quadruped(),
        }
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: SkeletonTopology::load(&path).map_err(err)?,
        })
    }

    #[getter]
    fn joint_names(&self) -> Vec<String> {
        self.inner.joint_names().to_vec()
    }

    #[getter]
    fn bones(&self) -> Vec<(usize, usize)> {
        self.inner.bones().to_vec()
    }

    #[getter]
    fn eval_subset(&self) -> Vec<usize> {
        self.inner.eval_subset().to_vec()
    }

    #[getter]
    fn root(&self) -> usize {
        self.inner.root_index()
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }

    fn __len__(&self) -> usize {
        self.inner.num_joints()
    }
}

/// 3x3 rotation `R_elevation R_azimuth`, as nested lists.
#[pyfunction]
fn rotation(azimuth: f64, elevation: f64) -> [[f64; 3]; 3] {
    RotationMatrix::from_spec(RotationSpec { azimuth, elevation }).0
}

#[pyfunction]
#[pyo3(signature = (pose, azimuth, elevation, delta = 10.0))]
fn rotate(
    pose: Vec<[f64; 3]>,
    azimuth: f64,
    elevation: f64,
    delta: f64,
) -> PyResult<Vec<[f64; 3]>> {
    let r = RotationMatrix::from_spec(RotationSpec { azimuth, elevation });
    let v = geometry::rotate(&pose3d(pose)?, &r, [0.0, 0.0, delta]).map_err(err)?;
    Ok(v.coords().to_vec())
}

#[pyfunction]
#[pyo3(signature = (pose, delta = 10.0, z_min = 0.1))]
fn project(pose: Vec<[f64; 3]>, delta: f64, z_min: f64) -> PyResult<Vec<[f64; 2]>> {
    Ok(geometry::project(&pose3d(pose)?, delta, z_min)
        .map_err(err)?
        .coords()
        .to_vec())
}

#[pyfunction]
#[pyo3(signature = (pose, depth_offsets, delta = 10.0, z_min = 0.1))]
fn lift(
    pose: Vec<[f64; 2]>,
    depth_offsets: Vec<f64>,
    delta: f64,
    z_min: f64,
) -> PyResult<Vec<[f64; 3]>> {
    Ok(geometry::lift(&pose2d(pose)?, &depth_offsets, delta, z_min)
        .map_err(err)?
        .coords()
        .to_vec())
}

/// Skeleton image of a 2D pose, `size * size` values.
#[pyfunction]
#[pyo3(signature = (pose, topology, size = 128, gamma = 500.0))]
fn render(
    pose: Vec<[f64; 2]>,
    topology: &PyTopology,
    size: usize,
    gamma: f64,
) -> PyResult<Vec<f64>> {
    let cfg = RenderConfig {
        height: size,
        width: size,
        gamma,
    };
    Ok(renderer::render(&pose2d(pose)?, &topology.inner, &cfg)
        .map_err(err)?
        .pixels()
        .to_vec())
}

/// `n` unpaired prior poses from the procedural quadruped.
#[pyfunction]
#[pyo3(signature = (n, topology, seed = 0))]
fn generate_prior(n: usize, topology: &PyTopology, seed: u64) -> PyResult<Vec<Vec<[f64; 2]>>> {
    let prior = build_prior(
        n,
        &QuadrupedParams::default(),
        &topology.inner,
        &GeometryConfig::default(),
        seed,
    )
    .map_err(err)?;
    Ok(prior.poses.iter().map(|p| p.coords().to_vec()).collect())
}

/// PCK report as a dict with per-joint, per-group and mean percentages.
/// Poses may hold every joint or only the evaluated subset.
#[pyfunction]
#[pyo3(signature = (preds, gts, topology, alpha = 0.05))]
fn pck_report<'py>(
    py: Python<'py>,
    preds: Vec<Vec<[f64; 2]>>,
    gts: Vec<Vec<[f64; 2]>>,
    topology: &PyTopology,
    alpha: f64,
) -> PyResult<Bound<'py, pyo3::types::PyDict>> {
    let topo = &topology.inner;
    let eval_pose = |rows: Vec<[f64; 2]>| -> PyResult<Pose2D> {
        let p = pose2d(rows)?;
        if p.num_joints() == topo.num_joints() {
            p.subset(topo).map_err(err)
        } else {
            Ok(p)
        }
    };
    let preds = preds
        .into_iter()
        .map(eval_pose)
        .collect::<PyResult<Vec<_>>>()?;
    let gts = gts
        .into_iter()
        .map(eval_pose)
        .collect::<PyResult<Vec<_>>>()?;
    let names: Vec<String> = topology
        .inner
        .eval_joint_names()
        .iter()
        .map(|s| s.to_string())
        .collect();
    let r = evaluation::pck_report(&preds, &gts, alpha, &names).map_err(err)?;
    let d = pyo3::types::PyDict::new(py);
    d.set_item("alpha", r.alpha)?;
    d.set_item("samples", r.samples)?;
    d.set_item("per_joint", r.per_joint.clone())?;
    d.set_item("groups", r.groups.clone())?;
    d.set_item("mean", r.mean)?;
    d.set_item("table", r.to_table("model"))?;
    Ok(d)
}

#[pyfunction]
fn mpjpe(pred: Vec<[f64; 3]>, gt: Vec<[f64; 3]>) -> PyResult<f64> {
    evaluation::mpjpe(&pose3d(pred)?, &pose3d(gt)?).map_err(err)
}

#[pyfunction]
fn pa_mpjpe(pred: Vec<[f64; 3]>, gt: Vec<[f64; 3]>) -> PyResult<f64> {
    evaluation::pa_mpjpe(&pose3d(pred)?, &pose3d(gt)?).map_err(err)
}

/// Φ, Ω, Λ and D with their configuration.
#[pyclass(name = "Model", frozen)]
struct PyModel {
    model: Model<f32>,
    topology: SkeletonTopology,
    geometry: GeometryConfig,
    step: u64,
}

#[pymethods]
impl PyModel {
    /// Freshly initialized networks. `image_size` must match the images
    /// later passed to `predict`.
    #[staticmethod]
    #[pyo3(signature = (topology, seed = 0, image_size = 128))]
    fn init(topology: &PyTopology, seed: u64, image_size: usize) -> PyResult<Self> {
        let cfg = NetworkConfig {
            image_size,
            ..NetworkConfig::default()
        };
        Ok(Self {
            model: Model::new(&cfg, &topology.inner, seed).map_err(err)?,
            topology: topology.inner.clone(),
            geometry: GeometryConfig::default(),
            step: 0,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf, topology: &PyTopology) -> PyResult<Self> {
        let ck = Checkpoint::read(&path, &topology.inner).map_err(err)?;
        let cfg = TrainState::config_of(&ck).map_err(err)?;
        Ok(Self {
            step: ck.step,
            model: ck.model,
            topology: topology.inner.clone(),
            geometry: cfg.scene.geometry,
        })
    }

    #[getter]
    fn step(&self) -> u64 {
        self.step
    }

    #[getter]
    fn image_size(&self) -> usize {
        self.model.config.image_size
    }

    fn parameter_count(&self) -> usize {
        self.model.parameter_count()
    }

    /// Predictions for flat grey images: a dict of `skeleton_images`,
    /// `poses2d`, `depth_offsets` and `poses3d`, one entry per image.
    fn predict<'py>(
        &self,
        py: Python<'py>,
        images: Vec<Vec<f64>>,
    ) -> PyResult<Bound<'py, pyo3::types::PyDict>> {
        let refs: Vec<&[f64]> = images.iter().map(Vec::as_slice).collect();
        let p = py
            .detach(|| predict_pixels(&self.model, &self.topology, &self.geometry, &refs, 16))
            .map_err(err)?;
        let d = pyo3::types::PyDict::new(py);
        d.set_item("skeleton_images", p.skeleton_images)?;
        d.set_item(
            "poses2d",
            p.poses2d
                .iter()
                .map(|p| p.coords().to_vec())
                .collect::<Vec<_>>(),
        )?;
        d.set_item("depth_offsets", p.depth_offsets)?;
        d.set_item(
            "poses3d",
            p.poses3d
                .iter()
                .map(|p| p.coords().to_vec())
                .collect::<Vec<_>>(),
        )?;
        Ok(d)
    }
}

/// Trains on synthetic images with the TOML configuration `config` (empty
/// for defaults) and returns the final checkpoint path.
#[pyfunction]
#[pyo3(signature = (out_dir, config = "", steps = None))]
fn train(py: Python<'_>, out_dir: PathBuf, config: &str, steps: Option<u64>) -> PyResult<String> {
    let mut cfg = TrainConfig::from_toml(config).map_err(err)?;
    if let Some(s) = steps {
        cfg.steps = s;
    }
    py.detach(|| {
        let topology = SkeletonTopology::quadruped();
        let images = selfpose::synthetic::SyntheticImages::new(
            cfg.scene.clone(),
            topology.clone(),
            cfg.seed,
            cfg.n_train_images,
        )?;
        let prior = build_prior(
            cfg.n_prior,
            &cfg.scene.quadruped,
            &topology,
            &cfg.scene.geometry,
            cfg.seed,
        )?;
        let data = TrainData {
            images: &images,
            prior: &prior,
            validation: &[],
        };
        let out = fit(&cfg, &data, &topology, &out_dir, None)?;
        Ok(out.checkpoint.display().to_string())
    })
    .map_err(err)
}

/// Runs the command-line interface with `args` (without the program name)
/// and returns its exit code.
#[pyfunction]
fn cli(args: Vec<String>) -> i32 {
    selfpose::cli::run(std::iter::once("selfpose".to_string()).chain(args))
}

#[pymodule]
fn selfpose_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTopology>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(rotation, m)?)?;
    m.add_function(wrap_pyfunction!(rotate, m)?)?;
    m.add_function(wrap_pyfunction!(project, m)?)?;
    m.add_function(wrap_pyfunction!(lift, m)?)?;
    m.add_function(wrap_pyfunction!(render, m)?)?;
    m.add_function(wrap_pyfunction!(generate_prior, m)?)?;
    m.add_function(wrap_pyfunction!(pck_report, m)?)?;
    m.add_function(wrap_pyfunction!(mpjpe, m)?)?;
    m.add_function(wrap_pyfunction!(pa_mpjpe, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(cli, m)?)?;
    Ok(())
}

//! Python bindings: synthetic takes, training, inference and metrics.
//!
//! Poses cross the boundary as nested lists: device poses as 4x4 row-major
//! matrices, joint positions as `[frame][joint][xyz]`.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;

use egomotion::dataio::{
    generate_take, motion_from_container, motion_to_container, read_container, take_from_container,
    take_to_container, window_dataset, write_container, Activity, SyntheticTake, TakeSplit, WindowConfig,
};
use egomotion::denoiser::DenoiserConfig;
use egomotion::diffusion::SamplerOptions;
use egomotion::pipeline::{self, Checkpoint, Dataset, TrainConfig};
use egomotion::se3::{motion_positions, MotionSequence, Se3, Skeleton};
use egomotion::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::Numerical { .. } => PyArithmeticError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn se3_rows(t: &Se3) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = (0..3)
        .map(|r| {
            let mut row: Vec<f64> = (0..3).map(|c| t.rotation[(r, c)]).collect();
            row.push(t.translation[r]);
            row
        })
        .collect();
    rows.push(vec![0.0, 0.0, 0.0, 1.0]);
    rows
}

fn positions_list(p: Vec<Vec<egomotion::se3::Vec3>>) -> Vec<Vec<[f64; 3]>> {
    p.into_iter().map(|f| f.into_iter().map(|v| [v.x, v.y, v.z]).collect()).collect()
}

fn sampler(steps: Option<usize>) -> SamplerOptions {
    SamplerOptions {
        steps,
        zero_variance: false,
    }
}

/// Rigid kinematic skeleton.
#[pyclass(name = "Skeleton", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PySkeleton(Skeleton);

#[pymethods]
impl PySkeleton {
    #[staticmethod]
    fn humanoid22() -> Self {
        Self(Skeleton::humanoid22())
    }

    #[getter]
    fn id(&self) -> String {
        self.0.id.clone()
    }

    #[getter]
    fn num_joints(&self) -> usize {
        self.0.num_joints()
    }

    /// Width of the head-centric feature vector for this skeleton.
    fn feature_width(&self) -> usize {
        egomotion::repr::feature_width(&self.0)
    }
}

/// Pose parameters over time.
#[pyclass(name = "Motion", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyMotion(MotionSequence);

#[pymethods]
impl PyMotion {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let c = read_container(&path).map_err(py_err)?;
        Ok(Self(motion_from_container(&c).map_err(py_err)?))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        write_container(&motion_to_container(&self.0), &path).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    #[getter]
    fn fps(&self) -> f64 {
        self.0.fps
    }

    #[getter]
    fn skeleton_id(&self) -> String {
        self.0.skeleton_id.clone()
    }

    /// World joint positions, `[frame][joint][xyz]`.
    fn positions(&self, skeleton: &PySkeleton) -> PyResult<Vec<Vec<[f64; 3]>>> {
        Ok(positions_list(motion_positions(&skeleton.0, &self.0).map_err(py_err)?))
    }
}

/// A synthetic capture: motion, device trajectory and image features.
#[pyclass(name = "Take", frozen, from_py_object)]
#[derive(Clone)]
struct PyTake(SyntheticTake);

#[pymethods]
impl PyTake {
    /// Generate a take; `activity` is a catalogue name such as "walk-line".
    #[staticmethod]
    #[pyo3(signature = (scene, activity, duration, seed, skeleton))]
    fn generate(scene: u32, activity: &str, duration: f64, seed: u64, skeleton: &PySkeleton) -> PyResult<Self> {
        let act = Activity::from_name(activity).map_err(py_err)?;
        Ok(Self(generate_take(scene, act.id(), duration, seed, &skeleton.0).map_err(py_err)?))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let c = read_container(&path).map_err(py_err)?;
        Ok(Self(take_from_container(&c).map_err(py_err)?))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        write_container(&take_to_container(&self.0), &path).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    #[getter]
    fn motion(&self) -> PyMotion {
        PyMotion(self.0.motion.clone())
    }

    /// Device poses as 4x4 matrices.
    fn trajectory(&self) -> Vec<Vec<Vec<f64>>> {
        self.0.trajectory.iter().map(se3_rows).collect()
    }

    fn image_features(&self) -> Vec<Vec<f64>> {
        (0..self.0.features.rows()).map(|r| self.0.features.row(r).to_vec()).collect()
    }
}

/// Trained denoiser with its normalizer and optimizer state.
#[pyclass(name = "Model", frozen)]
struct PyModel(Checkpoint);

impl PyModel {
    fn skeleton(&self) -> PyResult<Skeleton> {
        Skeleton::by_id(&self.0.skeleton_id)
            .ok_or_else(|| PyValueError::new_err(format!("unknown skeleton '{}'", self.0.skeleton_id)))
    }

    fn window<'a>(&self, take: &'a PyTake, start: usize, frames: usize) -> PyResult<(&'a [Se3], egomotion::tensor::Mat)> {
        let t = &take.0;
        if frames == 0 || start + frames > t.len() {
            return Err(PyValueError::new_err(format!(
                "{frames} frames from {start} do not fit in a {}-frame take",
                t.len()
            )));
        }
        Ok((&t.trajectory[start..start + frames], t.features.slice_rows(start, frames)))
    }
}

#[pymethods]
impl PyModel {
    /// Train on 8 s windows of `takes`. `config` is TOML for the training
    /// options; `toy` selects the small two-layer network.
    #[staticmethod]
    #[pyo3(signature = (takes, config = "", toy = true))]
    fn train(py: Python<'_>, takes: Vec<PyTake>, config: &str, toy: bool) -> PyResult<Self> {
        let cfg: TrainConfig = toml::from_str(config).map_err(|e| PyValueError::new_err(e.to_string()))?;
        let takes: Vec<SyntheticTake> = takes.into_iter().map(|t| t.0).collect();
        if takes.is_empty() {
            return Err(PyValueError::new_err("no takes"));
        }
        let skel = Skeleton::by_id(&takes[0].motion.skeleton_id)
            .ok_or_else(|| PyValueError::new_err("unknown skeleton"))?;
        let lengths: Vec<usize> = takes.iter().map(SyntheticTake::len).collect();
        let idx = window_dataset(&lengths, takes[0].motion.fps, &WindowConfig::default(), &TakeSplit::all_train(takes.len()))
            .map_err(py_err)?;
        let ds = Dataset::from_takes(&takes, &idx.train, &skel).map_err(py_err)?;
        let model = if toy {
            DenoiserConfig::toy(ds.feature_dim(), ds.image_dim())
        } else {
            DenoiserConfig::full_scale(ds.feature_dim(), ds.image_dim())
        };
        let ckpt = py
            .detach(|| pipeline::train(&ds, model, &cfg))
            .map_err(|f| py_err(f.error))?;
        Ok(Self(ckpt))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self(Checkpoint::load(&path).map_err(py_err)?))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(&path).map_err(py_err)
    }

    #[getter]
    fn step(&self) -> usize {
        self.0.step
    }

    #[getter]
    fn losses(&self) -> Vec<f64> {
        self.0.step_losses.clone()
    }

    #[pyo3(signature = (take, start = 0, frames = 80, seed = 0, sample_steps = None))]
    fn reconstruct(
        &self,
        py: Python<'_>,
        take: &PyTake,
        start: usize,
        frames: usize,
        seed: u64,
        sample_steps: Option<usize>,
    ) -> PyResult<PyMotion> {
        let skel = self.skeleton()?;
        let (traj, img) = self.window(take, start, frames)?;
        let p = py
            .detach(|| pipeline::reconstruct(&self.0, &skel, traj, &img, seed, &sampler(sample_steps)))
            .map_err(py_err)?;
        Ok(PyMotion(p.motion().clone()))
    }

    /// Observe `observed` frames from `start` and complete to `total`.
    #[pyo3(signature = (take, observed, total, start = 0, seed = 0, sample_steps = None))]
    #[allow(clippy::too_many_arguments)]
    fn forecast(
        &self,
        py: Python<'_>,
        take: &PyTake,
        observed: usize,
        total: usize,
        start: usize,
        seed: u64,
        sample_steps: Option<usize>,
    ) -> PyResult<PyMotion> {
        let skel = self.skeleton()?;
        let (traj, img) = self.window(take, start, observed.max(1))?;
        let (traj, img) = (&traj[..observed], img.slice_rows(0, observed));
        let p = py
            .detach(|| pipeline::forecast(&self.0, &skel, traj, &img, total, seed, &sampler(sample_steps)))
            .map_err(py_err)?;
        Ok(PyMotion(p.motion().clone()))
    }

    #[pyo3(signature = (image_feature, frames = 80, seed = 0, sample_steps = None))]
    fn generate(
        &self,
        py: Python<'_>,
        image_feature: Vec<f64>,
        frames: usize,
        seed: u64,
        sample_steps: Option<usize>,
    ) -> PyResult<PyMotion> {
        let skel = self.skeleton()?;
        let p = py
            .detach(|| pipeline::generate(&self.0, &skel, &image_feature, frames, seed, &sampler(sample_steps)))
            .map_err(py_err)?;
        Ok(PyMotion(p.motion().clone()))
    }
}

fn to_vec3(p: Vec<Vec<[f64; 3]>>) -> Vec<Vec<egomotion::se3::Vec3>> {
    p.into_iter()
        .map(|f| f.into_iter().map(|v| egomotion::se3::Vec3::new(v[0], v[1], v[2])).collect())
        .collect()
}

/// Mean per-joint position error between two `[frame][joint][xyz]` lists.
#[pyfunction]
fn mpjpe(pred: Vec<Vec<[f64; 3]>>, gt: Vec<Vec<[f64; 3]>>) -> PyResult<f64> {
    egomotion::metrics::mpjpe(&to_vec3(pred), &to_vec3(gt)).map_err(py_err)
}

/// MPJPE after per-frame rigid alignment.
#[pyfunction]
fn mpjpe_pa(pred: Vec<Vec<[f64; 3]>>, gt: Vec<Vec<[f64; 3]>>) -> PyResult<f64> {
    egomotion::metrics::mpjpe_pa(&to_vec3(pred), &to_vec3(gt)).map_err(py_err)
}

#[pymodule]
fn egomotion_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySkeleton>()?;
    m.add_class::<PyMotion>()?;
    m.add_class::<PyTake>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(mpjpe, m)?)?;
    m.add_function(wrap_pyfunction!(mpjpe_pa, m)?)?;
    m.add("ACTIVITIES", Activity::ALL.iter().map(|a| a.name()).collect::<Vec<_>>())?;
    Ok(())
}

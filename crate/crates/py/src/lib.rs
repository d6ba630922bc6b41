//! Python bindings: scene generation, visibility, policies, channel
//! accounting, checkpoints and evaluation.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use r2t_core::autograd::{ParamStore, Tape};
use r2t_core::channel::LinkBudget;
use r2t_core::eval::scene_ap;
use r2t_core::io::{load_checkpoint_into, read_file, save_checkpoint};
use r2t_core::model::{Ctx, Network};
use r2t_core::pipeline::PassConfig;
use r2t_core::policy::PolicyKind;
use r2t_core::scene::{self, OcclusionLevel};

fn py_err(e: r2t_core::Error) -> PyErr {
    match e {
        r2t_core::Error::Io(io) => PyIOError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn policy(name: &str) -> PyResult<PolicyKind> {
    name.parse().map_err(py_err)
}

#[pyclass(name = "SceneConfig", from_py_object)]
#[derive(Clone)]
struct PySceneConfig {
    inner: scene::SceneConfig,
}

#[pymethods]
impl PySceneConfig {
    #[new]
    #[pyo3(signature = (grid_size=64, n_objects=20, obs_noise_sigma=0.5, occlusion_level="medium", fov_deg=90.0, range=30.0, splat_sigma=1.0))]
    fn new(
        grid_size: usize,
        n_objects: usize,
        obs_noise_sigma: f64,
        occlusion_level: &str,
        fov_deg: f64,
        range: f64,
        splat_sigma: f64,
    ) -> PyResult<Self> {
        let inner = scene::SceneConfig {
            grid_size,
            n_agents: 4,
            n_objects,
            obs_noise_sigma,
            occlusion_level: occlusion_level.parse::<OcclusionLevel>().map_err(py_err)?,
            fov_deg,
            range,
            splat_sigma,
        };
        inner.validate().map_err(py_err)?;
        Ok(PySceneConfig { inner })
    }

    #[getter]
    fn grid_size(&self) -> usize {
        self.inner.grid_size
    }

    #[getter]
    fn n_objects(&self) -> usize {
        self.inner.n_objects
    }

    #[getter]
    fn occlusion_level(&self) -> String {
        self.inner.occlusion_level.to_string()
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.inner)
    }
}

#[pyclass(name = "Scene")]
struct PyScene {
    inner: scene::Scene,
}

impl PyScene {
    fn agent(&self, id: usize) -> PyResult<scene::AgentPose> {
        self.inner
            .agents
            .get(id)
            .copied()
            .ok_or_else(|| PyValueError::new_err(format!("no agent {id}")))
    }
}

#[pymethods]
impl PyScene {
    #[staticmethod]
    #[pyo3(signature = (config, seed, scene_id))]
    fn generate(config: &PySceneConfig, seed: u64, scene_id: u64) -> PyResult<Self> {
        let inner = scene::generate_scene(&config.inner, seed, scene_id).map_err(py_err)?;
        Ok(PyScene { inner })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let inner = r2t_core::io::read_scene(std::path::Path::new(path)).map_err(py_err)?;
        Ok(PyScene { inner })
    }

    fn save(&self, dir: &str) -> PyResult<(String, String)> {
        let (j, a) = r2t_core::io::write_scene(std::path::Path::new(dir), &self.inner).map_err(py_err)?;
        Ok((j.display().to_string(), a.display().to_string()))
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn scene_id(&self) -> u64 {
        self.inner.scene_id
    }

    #[getter]
    fn objects(&self) -> Vec<(i32, i32)> {
        self.inner.objects.clone()
    }

    #[getter]
    fn walls(&self) -> Vec<((i32, i32), (i32, i32))> {
        self.inner.walls.iter().map(|w| (w.start, w.end)).collect()
    }

    /// `(id, x, y, heading)` per agent.
    #[getter]
    fn agents(&self) -> Vec<(usize, f64, f64, f64)> {
        self.inner.agents.iter().map(|a| (a.id, a.x, a.y, a.heading)).collect()
    }

    #[getter]
    fn gt_heatmap(&self) -> Vec<f32> {
        self.inner.gt_heatmap.clone()
    }

    #[getter]
    fn gt_binary(&self) -> Vec<bool> {
        self.inner.gt_binary.clone()
    }

    fn line_of_sight(&self, a: (f64, f64), b: (f64, f64)) -> bool {
        self.inner.line_of_sight(a, b)
    }

    fn visible(&self, agent: usize, cell: (i32, i32)) -> PyResult<bool> {
        Ok(self.inner.visible(&self.agent(agent)?, cell))
    }

    fn visibility_map(&self, agent: usize) -> PyResult<Vec<bool>> {
        Ok(self.inner.visibility_map(&self.agent(agent)?))
    }

    /// Flat `[2, G, G]` observation of one agent.
    #[pyo3(signature = (agent, seed=None))]
    fn render_observation(&self, agent: usize, seed: Option<u64>) -> PyResult<Vec<f32>> {
        let a = self.agent(agent)?;
        Ok(self.inner.render_observation(&a, seed.unwrap_or(self.inner.seed)).data)
    }

    fn region_mass(&self) -> Vec<f64> {
        self.inner.region_mass(8)
    }
}

#[pyclass(name = "Model")]
struct PyModel {
    net: Network,
    store: ParamStore<f32>,
}

#[pymethods]
impl PyModel {
    /// Freshly initialized parameters.
    #[new]
    #[pyo3(signature = (seed=0))]
    fn new(seed: u64) -> PyResult<Self> {
        let (net, store) = Network::init::<f32>(seed).map_err(py_err)?;
        Ok(PyModel { net, store })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let (net, mut store) = Network::skeleton::<f32>().map_err(py_err)?;
        let bytes = read_file(std::path::Path::new(path)).map_err(py_err)?;
        load_checkpoint_into(&mut store, &bytes).map_err(py_err)?;
        Ok(PyModel { net, store })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_checkpoint(std::path::Path::new(path), &self.store).map_err(py_err)
    }

    /// Scalar parameter count of names starting with `prefix`.
    #[pyo3(signature = (prefix=""))]
    fn parameter_count(&self, prefix: &str) -> usize {
        self.store.count(prefix)
    }

    /// Mean AP over the receivers of `scene`.
    #[pyo3(signature = (scene, policy, budget, drop_rate=0.0, seed=42))]
    fn scene_ap(&self, scene: &PyScene, policy: &str, budget: f64, drop_rate: f64, seed: u64) -> PyResult<f64> {
        let cfg = PassConfig::eval(self::policy(policy)?, budget, drop_rate, seed, scene.inner.scene_id);
        scene_ap(&self.net, &self.store, &scene.inner, &cfg).map_err(py_err)
    }

    /// Selected region indices per `(sender, receiver)` link.
    #[pyo3(signature = (scene, policy, budget, seed=42))]
    fn masks(&self, scene: &PyScene, policy: &str, budget: f64, seed: u64) -> PyResult<Vec<(usize, usize, Vec<usize>)>> {
        let cfg = PassConfig::eval(self::policy(policy)?, budget, 0.0, seed, scene.inner.scene_id);
        let obs = scene.inner.observations();
        let mut tape = Tape::new();
        let mut cx = Ctx::new(&mut tape, &self.store);
        let pass = self.net.run_scene(&mut cx, &scene.inner, &obs, &cfg).map_err(py_err)?;
        let mut out = Vec::new();
        for (s, row) in pass.masks.iter().enumerate() {
            for (r, m) in row.iter().enumerate() {
                if let Some(m) = m {
                    out.push((s, r, m.indices()));
                }
            }
        }
        Ok(out)
    }
}

#[pyfunction]
fn average_precision(pred: Vec<f64>, gt: Vec<bool>) -> PyResult<f64> {
    r2t_core::eval::average_precision(&pred, &gt).map_err(py_err)
}

#[pyfunction]
fn regions_allowed(budget: f64) -> usize {
    r2t_core::policy::regions_allowed(budget)
}

/// `(regions_allowed, bytes_allowed, reported_kb)` of one link.
#[pyfunction]
fn link_budget(budget: f64) -> (usize, usize, f64) {
    let b = LinkBudget::new(budget);
    (b.regions_allowed, b.bytes_allowed, b.reported_kb)
}

#[pyfunction]
fn policy_names() -> Vec<&'static str> {
    PolicyKind::ALL.iter().map(|p| p.name()).collect()
}

#[pymodule]
fn r2t(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySceneConfig>()?;
    m.add_class::<PyScene>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(regions_allowed, m)?)?;
    m.add_function(wrap_pyfunction!(link_budget, m)?)?;
    m.add_function(wrap_pyfunction!(policy_names, m)?)?;
    Ok(())
}

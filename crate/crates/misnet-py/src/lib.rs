//! Python bindings: model construction, checkpoint IO, prediction, the six
//! evaluation metrics, the training losses, and small pipeline utilities.
//!
//! Arrays cross the boundary as flat `Vec<f64>` plus explicit dimensions
//! (row-major; images are channel-major CHW), so the module has no numpy
//! build dependency.

use misnet::config::RunConfig;
use misnet::datapipe::{apply_plan_image, AugmentationPlan};
use misnet::decoder::MisNet;
use misnet::metrics::{
    e_measure, mae, mdice_miou, s_measure, weighted_fmeasure, AlignmentMode, ThresholdMode,
};
use misnet::objective::{pixel_weight, weighted_bce, weighted_iou};
use misnet::tensor::{resize_bilinear_plane, Tape};
use misnet::types::{BinaryMask, ImageBatch, ProbMap};
use ndarray::{Array2, Array3, Axis};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use std::collections::HashMap;
use std::path::{Path, PathBuf};

fn to_py(e: misnet::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn plane_from(values: Vec<f64>, height: usize, width: usize, what: &str) -> PyResult<Array2<f64>> {
    if values.len() != height * width {
        return Err(PyValueError::new_err(format!(
            "{what}: expected {height}*{width} = {} values, got {}",
            height * width,
            values.len()
        )));
    }
    Array2::from_shape_vec((height, width), values)
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

fn mask_from(values: Vec<f64>, height: usize, width: usize) -> PyResult<BinaryMask> {
    let plane = plane_from(values, height, width, "mask")?;
    BinaryMask::new(plane).map_err(to_py)
}

/// A built (or restored) network plus the config it runs under.
#[pyclass(unsendable)]
struct Model {
    inner: MisNet,
    config: RunConfig,
}

impl Model {
    fn from_config(config: RunConfig) -> PyResult<Model> {
        let config = config.validate().map_err(to_py)?;
        let inner = MisNet::new(&config.model, config.train.seed).map_err(to_py)?;
        Ok(Model { inner, config })
    }
}

#[pymethods]
impl Model {
    /// Builds a freshly initialized model. `config_text` is the flat
    /// `key = value` format; the keyword arguments override it.
    #[new]
    #[pyo3(signature = (config_text=None, backbone=None, train_size=None, seed=None))]
    fn new(
        config_text: Option<&str>,
        backbone: Option<&str>,
        train_size: Option<usize>,
        seed: Option<u64>,
    ) -> PyResult<Model> {
        let mut config = match config_text {
            Some(text) => RunConfig::parse(text).map_err(to_py)?,
            None => RunConfig::default(),
        };
        if let Some(id) = backbone {
            config.model.backbone_id = id.to_string();
        }
        if let Some(s) = train_size {
            config.model.train_size = s;
        }
        if let Some(s) = seed {
            config.train.seed = s;
        }
        Model::from_config(config)
    }

    /// Restores a model from a checkpoint, using the config embedded in it.
    #[staticmethod]
    fn from_checkpoint(path: &str) -> PyResult<Model> {
        let ckpt = misnet::checkpoint::load_checkpoint(Path::new(path)).map_err(to_py)?;
        let config = ckpt.config().map_err(to_py)?.validate().map_err(to_py)?;
        let inner = MisNet::new(&config.model, config.train.seed).map_err(to_py)?;
        ckpt.apply(&inner).map_err(to_py)?;
        Ok(Model { inner, config })
    }

    /// Saves weights and config; the file round-trips through
    /// `from_checkpoint`.
    fn save(&self, path: &str) -> PyResult<()> {
        misnet::checkpoint::save_checkpoint(
            Path::new(path),
            &self.inner,
            &self.config,
            0,
            0,
            None,
            None,
        )
        .map_err(to_py)
    }

    /// Segments one RGB image given as a flat CHW array in [0, 1]. Returns
    /// (probabilities, (height, width)) at the input resolution.
    fn predict(
        &self,
        image: Vec<f64>,
        height: usize,
        width: usize,
    ) -> PyResult<(Vec<f64>, (usize, usize))> {
        if image.len() != 3 * height * width {
            return Err(PyValueError::new_err(format!(
                "image: expected 3*{height}*{width} = {} values, got {}",
                3 * height * width,
                image.len()
            )));
        }
        let img = Array3::from_shape_vec((3, height, width), image)
            .map_err(|e| PyValueError::new_err(e.to_string()))?;
        let x = apply_plan_image(&img, &AugmentationPlan::identity(), self.config.model.train_size);
        let batch = ImageBatch::new(x.insert_axis(Axis(0))).map_err(to_py)?;
        let prob = self.inner.predict(&batch).map_err(to_py)?.remove(0);
        let mut plane = prob.into_data();
        if plane.dim() != (height, width) {
            plane = resize_bilinear_plane(&plane, height, width);
            plane.mapv_inplace(|v| v.clamp(0.0, 1.0));
        }
        Ok((plane.into_raw_vec_and_offset().0, (height, width)))
    }

    /// The resolved config in its on-disk text form.
    fn config_text(&self) -> String {
        self.config.to_text()
    }

    fn backbone_id(&self) -> String {
        self.config.model.backbone_id.clone()
    }

    fn num_parameters(&self) -> usize {
        self.inner
            .registry()
            .params()
            .iter()
            .map(|p| p.shape().iter().product::<usize>())
            .sum()
    }

    fn parameter_names(&self) -> Vec<String> {
        self.inner
            .registry()
            .params()
            .iter()
            .map(|p| p.name().to_string())
            .collect()
    }
}

/// All six benchmark metrics for one prediction/mask pair, as a dict with
/// keys mdice, miou, wfm, sm, em, mae.
#[pyfunction]
#[pyo3(signature = (pred, mask, height, width, adaptive=false))]
fn evaluate_pair(
    pred: Vec<f64>,
    mask: Vec<f64>,
    height: usize,
    width: usize,
    adaptive: bool,
) -> PyResult<HashMap<String, f64>> {
    let s = ProbMap::new(plane_from(pred, height, width, "pred")?).map_err(to_py)?;
    let g = mask_from(mask, height, width)?;
    let mode = if adaptive { ThresholdMode::Adaptive } else { ThresholdMode::Fixed(0.5) };
    let (mdice, miou) = mdice_miou(&s, &g, mode);
    let (wfm, _) = weighted_fmeasure(&s, &g);
    let mut out = HashMap::new();
    out.insert("mdice".to_string(), mdice);
    out.insert("miou".to_string(), miou);
    out.insert("wfm".to_string(), wfm);
    out.insert("sm".to_string(), s_measure(&s, &g, 0.5));
    out.insert("em".to_string(), e_measure(&s, &g, AlignmentMode::Max));
    out.insert("mae".to_string(), mae(&s, &g));
    Ok(out)
}

/// The two training losses (weight-map BCE, weight-map IoU) for one logit
/// map against one mask.
#[pyfunction]
fn weighted_losses(
    logits: Vec<f64>,
    mask: Vec<f64>,
    height: usize,
    width: usize,
) -> PyResult<(f64, f64)> {
    let x = plane_from(logits, height, width, "logits")?;
    let g = mask_from(mask, height, width)?;
    let omega = pixel_weight(&g, misnet::objective::WEIGHT_WINDOW, misnet::objective::WEIGHT_MULTIPLIER);
    let gd = g.data().clone().into_dyn();
    let od = omega.into_dyn();
    let t = Tape::eval();
    let v = t.constant(x.into_dyn());
    let bce = weighted_bce(v, &gd, &od).scalar();
    let iou = weighted_iou(v, &gd, &od).scalar();
    Ok((bce, iou))
}

/// The boundary-emphasizing pixel weights for a mask (values in [1, 1+mult]).
#[pyfunction]
#[pyo3(signature = (mask, height, width, window=31, multiplier=5.0))]
fn pixel_weights(
    mask: Vec<f64>,
    height: usize,
    width: usize,
    window: usize,
    multiplier: f64,
) -> PyResult<Vec<f64>> {
    let g = mask_from(mask, height, width)?;
    let w = pixel_weight(&g, window, multiplier);
    Ok(w.into_raw_vec_and_offset().0)
}

/// Polynomially decayed learning rate for one epoch.
#[pyfunction]
#[pyo3(signature = (epoch, total_epochs, base_lr=1e-5, power=0.9))]
fn poly_lr(epoch: usize, total_epochs: usize, base_lr: f64, power: f64) -> PyResult<f64> {
    misnet::objective::poly_lr(epoch, total_epochs, base_lr, power).map_err(to_py)
}

/// Writes a synthetic blob corpus for self-contained experiments.
#[pyfunction]
fn generate_blob_dataset(root: &str, count: usize, side: usize, seed: u64) -> PyResult<Vec<String>> {
    misnet::datapipe::generate_blob_dataset(Path::new(root), count, side, seed).map_err(to_py)
}

/// The default run configuration in its text form, for editing from Python.
#[pyfunction]
fn default_config_text() -> String {
    RunConfig::default().to_text()
}

/// Trains on a dataset root; returns summary numbers as a dict with keys
/// epochs_run, best_val_mdice, first_step_loss, final_step_loss.
#[pyfunction]
#[pyo3(signature = (data_root, out_dir, config_text=None, epochs=None, backbone=None, batch_size=None, seed=None))]
#[allow(clippy::too_many_arguments)]
fn train(
    data_root: &str,
    out_dir: &str,
    config_text: Option<&str>,
    epochs: Option<usize>,
    backbone: Option<&str>,
    batch_size: Option<usize>,
    seed: Option<u64>,
) -> PyResult<HashMap<String, f64>> {
    let cmd = misnet::commands::TrainCmd {
        config: None,
        data_root: PathBuf::from(data_root),
        out: PathBuf::from(out_dir),
        epochs,
        batch_size,
        backbone: backbone.map(str::to_string),
        seed,
        resume: None,
        force: false,
        refresh_manifest: false,
        quiet: true,
    };
    // route config text through a file so the command's precedence applies
    let summary = match config_text {
        Some(text) => {
            let dir = PathBuf::from(out_dir);
            std::fs::create_dir_all(&dir).map_err(|e| PyValueError::new_err(e.to_string()))?;
            let path = dir.join("requested_config.txt");
            std::fs::write(&path, text).map_err(|e| PyValueError::new_err(e.to_string()))?;
            let cmd = misnet::commands::TrainCmd { config: Some(path), ..cmd };
            misnet::commands::cmd_train(&cmd).map_err(to_py)?
        }
        None => misnet::commands::cmd_train(&cmd).map_err(to_py)?,
    };
    let mut out = HashMap::new();
    out.insert("epochs_run".to_string(), summary.epochs.len() as f64);
    out.insert("best_val_mdice".to_string(), summary.best_val_mdice);
    out.insert("first_step_loss".to_string(), summary.first_step_loss);
    out.insert("final_step_loss".to_string(), summary.final_step_loss);
    Ok(out)
}

#[pymodule]
fn misnet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(evaluate_pair, m)?)?;
    m.add_function(wrap_pyfunction!(weighted_losses, m)?)?;
    m.add_function(wrap_pyfunction!(pixel_weights, m)?)?;
    m.add_function(wrap_pyfunction!(poly_lr, m)?)?;
    m.add_function(wrap_pyfunction!(generate_blob_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(default_config_text, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}

//! The five user-facing operations behind the CLI: train, eval, predict,
//! ablate, report. Each writes its resolved configuration to the output
//! directory before any compute so runs are reconstructible.

use crate::checkpoint::load_checkpoint;
use crate::config::{AblationVariant, RunConfig};
use crate::datapipe::{
    load_mask, load_or_build_manifest, load_rgb_planes, save_gray_png, AugmentationPlan,
    apply_plan_image, Split,
};
use crate::decoder::MisNet;
use crate::error::{Error, Result};
use crate::metrics::{evaluate_dataset, evaluate_pairs, MetricReport, ThresholdMode};
use crate::tensor::resize_bilinear_plane;
use crate::trainer::{train, TrainOptions, TrainSummary};
use crate::types::{ImageBatch, ProbMap};
use ndarray::Axis;
use std::path::{Path, PathBuf};

/// Loads a config file if given, applies flag overrides, validates.
pub fn resolve_config(
    path: Option<&Path>,
    apply: impl FnOnce(&mut RunConfig),
) -> Result<RunConfig> {
    let mut rc = match path {
        Some(p) => RunConfig::parse(&std::fs::read_to_string(p)?)?,
        None => RunConfig::default(),
    };
    apply(&mut rc);
    rc.validate()
}

fn pretrained_dir_from_env() -> Option<PathBuf> {
    std::env::var_os("MISNET_WEIGHTS_DIR").map(PathBuf::from)
}

/// A single dataset root holds `images/` and `masks/`; a collection root
/// holds one subdirectory per dataset.
fn discover_datasets(root: &Path) -> Result<Vec<PathBuf>> {
    if root.join("images").is_dir() && root.join("masks").is_dir() {
        return Ok(vec![root.to_path_buf()]);
    }
    let mut found = Vec::new();
    if root.is_dir() {
        for entry in std::fs::read_dir(root)? {
            let path = entry?.path();
            if path.join("images").is_dir() && path.join("masks").is_dir() {
                found.push(path);
            }
        }
    }
    found.sort();
    if found.is_empty() {
        return Err(Error::dataset(format!(
            "{} holds no dataset (expected images/ and masks/ here or in subdirectories)",
            root.display()
        )));
    }
    Ok(found)
}

/// `misnet train`
pub struct TrainCmd {
    pub config: Option<PathBuf>,
    pub data_root: PathBuf,
    pub out: PathBuf,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub backbone: Option<String>,
    pub seed: Option<u64>,
    pub resume: Option<PathBuf>,
    pub force: bool,
    pub refresh_manifest: bool,
    pub quiet: bool,
}

impl TrainCmd {
    pub fn new(data_root: impl Into<PathBuf>, out: impl Into<PathBuf>) -> TrainCmd {
        TrainCmd {
            config: None,
            data_root: data_root.into(),
            out: out.into(),
            epochs: None,
            batch_size: None,
            backbone: None,
            seed: None,
            resume: None,
            force: false,
            refresh_manifest: false,
            quiet: true,
        }
    }

    fn resolve(&self) -> Result<RunConfig> {
        resolve_config(self.config.as_deref(), |rc| {
            if let Some(e) = self.epochs {
                rc.train.epochs = e;
            }
            if let Some(b) = self.batch_size {
                rc.train.batch_size = b;
            }
            if let Some(id) = &self.backbone {
                rc.model.backbone_id = id.clone();
            }
            if let Some(s) = self.seed {
                rc.train.seed = s;
            }
        })
    }
}

pub fn cmd_train(cmd: &TrainCmd) -> Result<TrainSummary> {
    let config = cmd.resolve()?;
    let manifest = load_or_build_manifest(&cmd.data_root, config.train.seed, cmd.refresh_manifest)?;
    let opts = TrainOptions {
        out_dir: cmd.out.clone(),
        resume: cmd.resume.clone(),
        pretrained_dir: pretrained_dir_from_env(),
        force: cmd.force,
        quiet: cmd.quiet,
    };
    train(&config, &manifest, &opts)
}

/// Renders rows of (label, six means) as a markdown table, columns in the
/// benchmark order, with a closing MEAN row when asked.
pub fn render_metric_table(
    label_header: &str,
    rows: &[(String, [f64; 6])],
    mean_row: bool,
) -> String {
    let mut s = format!(
        "| {label_header} | mDice | mIoU | wFm | Sm | Em | MAE |\n\
         |---|---|---|---|---|---|---|\n"
    );
    for (label, m) in rows {
        s.push_str(&format!(
            "| {label} | {:.6} | {:.6} | {:.6} | {:.6} | {:.6} | {:.6} |\n",
            m[0], m[1], m[2], m[3], m[4], m[5]
        ));
    }
    if mean_row {
        let n = rows.len().max(1) as f64;
        let mut acc = [0.0f64; 6];
        for (_, m) in rows {
            for (a, v) in acc.iter_mut().zip(m) {
                *a += v;
            }
        }
        let m = acc.map(|v| v / n);
        s.push_str(&format!(
            "| MEAN | {:.6} | {:.6} | {:.6} | {:.6} | {:.6} | {:.6} |\n",
            m[0], m[1], m[2], m[3], m[4], m[5]
        ));
    }
    s
}

/// Runs eval-mode inference on one raw RGB image and returns the
/// probability map resized back to (h, w).
fn predict_plane(model: &MisNet, img: &ndarray::Array3<f64>, train_size: usize, h: usize, w: usize) -> Result<ndarray::Array2<f64>> {
    let x = apply_plan_image(img, &AugmentationPlan::identity(), train_size);
    let batch = ImageBatch::new(x.insert_axis(Axis(0)))?;
    let prob = model.predict(&batch)?.remove(0);
    let mut plane = prob.into_data();
    if plane.dim() != (h, w) {
        plane = resize_bilinear_plane(&plane, h, w);
        plane.mapv_inplace(|v| v.clamp(0.0, 1.0));
    }
    Ok(plane)
}

/// Scores a restored model over the test split of every dataset under
/// `data_root`, writing predictions and per-dataset CSVs under `out`.
fn eval_model(
    model: &MisNet,
    config: &RunConfig,
    data_root: &Path,
    out: &Path,
    mode: ThresholdMode,
    refresh_manifest: bool,
    save_preds: bool,
) -> Result<Vec<MetricReport>> {
    let mut reports = Vec::new();
    for root in discover_datasets(data_root)? {
        let manifest = load_or_build_manifest(&root, config.train.seed, refresh_manifest)?;
        let pairs = manifest.pairs_for(Split::Test);
        if pairs.is_empty() {
            return Err(Error::dataset(format!(
                "dataset {} has an empty test split",
                manifest.dataset_id
            )));
        }
        let pred_dir = out.join("pred").join(&manifest.dataset_id);
        if save_preds {
            std::fs::create_dir_all(&pred_dir)?;
        }
        let mut items = Vec::with_capacity(pairs.len());
        for pair in pairs {
            let img = load_rgb_planes(&pair.image)?;
            let mask = load_mask(&pair.mask)?;
            let (gh, gw) = mask.data().dim();
            let plane = predict_plane(model, &img, config.model.train_size, gh, gw)?;
            if save_preds {
                save_gray_png(&pred_dir.join(format!("{}.png", pair.stem)), &plane)?;
            }
            items.push((pair.stem.clone(), ProbMap::new(plane)?, mask));
        }
        let report = evaluate_pairs(&manifest.dataset_id, &items, mode)?;
        std::fs::write(
            out.join(format!("{}_metrics.csv", manifest.dataset_id)),
            report.to_csv(),
        )?;
        reports.push(report);
    }
    Ok(reports)
}

/// `misnet eval`
pub struct EvalCmd {
    /// Score a trained model ...
    pub checkpoint: Option<PathBuf>,
    /// ... or a directory of already-rendered prediction images.
    pub pred_dir: Option<PathBuf>,
    pub config: Option<PathBuf>,
    pub data_root: PathBuf,
    pub out: PathBuf,
    pub threshold_mode: ThresholdMode,
    pub force: bool,
    pub refresh_manifest: bool,
}

impl EvalCmd {
    pub fn new(data_root: impl Into<PathBuf>, out: impl Into<PathBuf>) -> EvalCmd {
        EvalCmd {
            checkpoint: None,
            pred_dir: None,
            config: None,
            data_root: data_root.into(),
            out: out.into(),
            threshold_mode: ThresholdMode::Fixed(0.5),
            force: false,
            refresh_manifest: false,
        }
    }
}

/// What `cmd_eval` leaves behind.
pub struct EvalOutput {
    pub reports: Vec<MetricReport>,
    pub report_path: PathBuf,
}

pub fn cmd_eval(cmd: &EvalCmd) -> Result<EvalOutput> {
    std::fs::create_dir_all(&cmd.out)?;
    let reports = match (&cmd.checkpoint, &cmd.pred_dir) {
        (Some(ckpt_path), None) => {
            let ckpt = load_checkpoint(ckpt_path)?;
            let config = match &cmd.config {
                Some(p) => RunConfig::parse(&std::fs::read_to_string(p)?)?.validate()?,
                None => ckpt.config()?.validate()?,
            };
            if !ckpt.matches(&config) && !cmd.force {
                return Err(Error::checkpoint(format!(
                    "{} was written under a different config; pass force to use it",
                    ckpt_path.display()
                )));
            }
            std::fs::write(cmd.out.join("config.txt"), config.to_text())?;
            let model = MisNet::new(&config.model, config.train.seed)?;
            ckpt.apply(&model)?;
            eval_model(
                &model,
                &config,
                &cmd.data_root,
                &cmd.out,
                cmd.threshold_mode,
                cmd.refresh_manifest,
                true,
            )?
        }
        (None, Some(pred_dir)) => {
            let gt_dir = if cmd.data_root.join("masks").is_dir() {
                cmd.data_root.join("masks")
            } else {
                cmd.data_root.clone()
            };
            let id = cmd
                .data_root
                .file_name()
                .and_then(|s| s.to_str())
                .unwrap_or("custom")
                .to_string();
            let report = evaluate_dataset(pred_dir, &gt_dir, &id, cmd.threshold_mode)?;
            std::fs::write(cmd.out.join(format!("{id}_metrics.csv")), report.to_csv())?;
            vec![report]
        }
        _ => {
            return Err(Error::config(
                "pass exactly one of a checkpoint or a prediction directory",
            ))
        }
    };
    let rows: Vec<(String, [f64; 6])> =
        reports.iter().map(|r| (r.dataset_id.clone(), r.means)).collect();
    let md = render_metric_table("Dataset", &rows, true);
    let report_path = cmd.out.join("report.md");
    std::fs::write(&report_path, md)?;
    Ok(EvalOutput { reports, report_path })
}

/// `misnet predict`
pub struct PredictCmd {
    pub checkpoint: PathBuf,
    pub config: Option<PathBuf>,
    /// One image file, a directory of images, or a dataset root.
    pub input: PathBuf,
    pub out: PathBuf,
    pub force: bool,
}

pub fn cmd_predict(cmd: &PredictCmd) -> Result<Vec<PathBuf>> {
    let ckpt = load_checkpoint(&cmd.checkpoint)?;
    let config = match &cmd.config {
        Some(p) => RunConfig::parse(&std::fs::read_to_string(p)?)?.validate()?,
        None => ckpt.config()?.validate()?,
    };
    if !ckpt.matches(&config) && !cmd.force {
        return Err(Error::checkpoint(format!(
            "{} was written under a different config; pass force to use it",
            cmd.checkpoint.display()
        )));
    }
    std::fs::create_dir_all(&cmd.out)?;
    std::fs::write(cmd.out.join("config.txt"), config.to_text())?;
    let model = MisNet::new(&config.model, config.train.seed)?;
    ckpt.apply(&model)?;

    let inputs: Vec<PathBuf> = if cmd.input.is_file() {
        vec![cmd.input.clone()]
    } else {
        let dir = if cmd.input.join("images").is_dir() {
            cmd.input.join("images")
        } else {
            cmd.input.clone()
        };
        let mut v: Vec<PathBuf> = std::fs::read_dir(&dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg" | "bmp"))
            })
            .collect();
        v.sort();
        if v.is_empty() {
            return Err(Error::dataset(format!("no images under {}", dir.display())));
        }
        v
    };
    let mut written = Vec::with_capacity(inputs.len());
    for path in inputs {
        let img = load_rgb_planes(&path)?;
        let (_, h, w) = img.dim();
        let plane = predict_plane(&model, &img, config.model.train_size, h, w)?;
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::dataset(format!("unreadable name {}", path.display())))?;
        let out_path = cmd.out.join(format!("{stem}.png"));
        save_gray_png(&out_path, &plane)?;
        written.push(out_path);
    }
    Ok(written)
}

/// `misnet ablate`
pub struct AblateCmd {
    pub config: Option<PathBuf>,
    pub data_root: PathBuf,
    pub out: PathBuf,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub backbone: Option<String>,
    pub seed: Option<u64>,
    /// Subset of variant names; `None` runs the full grid.
    pub variants: Option<Vec<String>>,
    pub threshold_mode: ThresholdMode,
    pub refresh_manifest: bool,
    pub quiet: bool,
}

impl AblateCmd {
    pub fn new(data_root: impl Into<PathBuf>, out: impl Into<PathBuf>) -> AblateCmd {
        AblateCmd {
            config: None,
            data_root: data_root.into(),
            out: out.into(),
            epochs: None,
            batch_size: None,
            backbone: None,
            seed: None,
            variants: None,
            threshold_mode: ThresholdMode::Fixed(0.5),
            refresh_manifest: false,
            quiet: true,
        }
    }
}

/// Trains and scores every requested variant, then writes a comparison
/// table to `<out>/ablation.md`.
pub fn cmd_ablate(cmd: &AblateCmd) -> Result<PathBuf> {
    let base = resolve_config(cmd.config.as_deref(), |rc| {
        if let Some(e) = cmd.epochs {
            rc.train.epochs = e;
        }
        if let Some(b) = cmd.batch_size {
            rc.train.batch_size = b;
        }
        if let Some(id) = &cmd.backbone {
            rc.model.backbone_id = id.clone();
        }
        if let Some(s) = cmd.seed {
            rc.train.seed = s;
        }
    })?;
    let variants: Vec<AblationVariant> = match &cmd.variants {
        None => AblationVariant::ALL.to_vec(),
        Some(names) => names
            .iter()
            .map(|n| AblationVariant::from_name(n))
            .collect::<Result<Vec<_>>>()?,
    };
    std::fs::create_dir_all(&cmd.out)?;
    std::fs::write(cmd.out.join("config.txt"), base.to_text())?;
    let manifest = load_or_build_manifest(&cmd.data_root, base.train.seed, cmd.refresh_manifest)?;

    let mut rows = Vec::with_capacity(variants.len());
    for variant in &variants {
        let mut config = base.clone();
        config.model = variant.apply(&config.model);
        let config = config.validate()?;
        let run_dir = cmd.out.join(variant.name());
        let opts = TrainOptions {
            out_dir: run_dir.clone(),
            resume: None,
            pretrained_dir: pretrained_dir_from_env(),
            force: false,
            quiet: cmd.quiet,
        };
        train(&config, &manifest, &opts)?;
        let model = crate::trainer::restore_model(&run_dir.join("best.ckpt"), &config, false)?;
        let reports = eval_model(
            &model,
            &config,
            &cmd.data_root,
            &run_dir,
            cmd.threshold_mode,
            false,
            false,
        )?;
        let n = reports.len() as f64;
        let mut means = [0.0f64; 6];
        for r in &reports {
            for (a, v) in means.iter_mut().zip(&r.means) {
                *a += v / n;
            }
        }
        rows.push((variant.name().to_string(), means));
    }
    let md = render_metric_table("Variant", &rows, false);
    let path = cmd.out.join("ablation.md");
    std::fs::write(&path, md)?;
    Ok(path)
}

/// `misnet report`
pub struct ReportCmd {
    /// Metric CSV files, or directories to scan for `*_metrics.csv`.
    pub inputs: Vec<PathBuf>,
    /// Markdown file to write.
    pub out: PathBuf,
}

fn parse_csv_means(path: &Path) -> Result<(String, [f64; 6])> {
    let text = std::fs::read_to_string(path)?;
    let mean_line = text
        .lines()
        .find(|l| l.starts_with("MEAN,"))
        .ok_or_else(|| Error::metric(format!("{} has no MEAN row", path.display())))?;
    let cells: Vec<&str> = mean_line.split(',').collect();
    if cells.len() < 7 {
        return Err(Error::metric(format!("{} MEAN row is too short", path.display())));
    }
    let mut means = [0.0f64; 6];
    for (slot, cell) in means.iter_mut().zip(&cells[1..7]) {
        *slot = cell
            .parse()
            .map_err(|e| Error::metric(format!("{}: bad MEAN cell {cell}: {e}", path.display())))?;
    }
    let label = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("dataset")
        .trim_end_matches("_metrics")
        .to_string();
    Ok((label, means))
}

/// Re-renders stored metric CSVs as one combined markdown table.
pub fn cmd_report(cmd: &ReportCmd) -> Result<PathBuf> {
    let mut files = Vec::new();
    for input in &cmd.inputs {
        if input.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(input)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    p.file_name()
                        .and_then(|n| n.to_str())
                        .is_some_and(|n| n.ends_with("_metrics.csv"))
                })
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(input.clone());
        }
    }
    if files.is_empty() {
        return Err(Error::metric("no metric CSV files to report on".to_string()));
    }
    let rows = files
        .iter()
        .map(|p| parse_csv_means(p))
        .collect::<Result<Vec<_>>>()?;
    let md = render_metric_table("Dataset", &rows, true);
    if let Some(dir) = cmd.out.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(&cmd.out, md)?;
    Ok(cmd.out.clone())
}

//! The training loop: polynomially decayed Adam over augmented batches with
//! deep supervision, per-epoch validation, and latest/best checkpointing.
//!
//! Determinism contract: the batch sequence of epoch `e` is a pure function
//! of (config seed, e), so two runs with the same config produce identical
//! batches, identical losses, and identical checkpoints, and a resumed run
//! continues exactly where the interrupted one would have gone.

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::datapipe::{load_example, DatasetManifest, ManifestPair, Split};
use crate::decoder::MisNet;
use crate::error::{Error, Result};
use crate::metrics::{mdice_miou, ThresholdMode};
use crate::nn::{clip_grad_norm, Adam};
use crate::objective::{poly_lr, total_loss};
use crate::tensor::Tape;
use crate::types::{BinaryMask, ImageBatch};
use ndarray::Array4;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::{Path, PathBuf};

/// Everything `train` needs besides the config and the data.
pub struct TrainOptions {
    pub out_dir: PathBuf,
    /// Checkpoint to continue from.
    pub resume: Option<PathBuf>,
    /// Load `<dir>/<backbone_id>.ckpt` into the backbone before training.
    pub pretrained_dir: Option<PathBuf>,
    /// Accept a resume checkpoint whose config hash differs.
    pub force: bool,
    /// Echo log lines to stdout as they are written.
    pub quiet: bool,
}

impl TrainOptions {
    pub fn new(out_dir: impl Into<PathBuf>) -> TrainOptions {
        TrainOptions {
            out_dir: out_dir.into(),
            resume: None,
            pretrained_dir: None,
            force: false,
            quiet: true,
        }
    }
}

/// One epoch's aggregate numbers.
#[derive(Debug, Clone, Copy)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub mean_total: f64,
    pub val_mdice: f64,
}

/// What a finished (or resumed-and-finished) run reports back.
#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub epochs: Vec<EpochLog>,
    pub first_step_loss: f64,
    pub final_step_loss: f64,
    pub best_val_mdice: f64,
    pub global_steps: u64,
}

/// Deterministic RNG for one epoch's shuffling and augmentation.
fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Builds the augmented batches of one epoch. Pure in (config, epoch), which
/// is what makes two same-seed runs bitwise identical.
pub fn epoch_batches(
    pairs: &[&ManifestPair],
    config: &RunConfig,
    epoch: usize,
) -> Result<Vec<(ImageBatch, Vec<BinaryMask>)>> {
    if pairs.is_empty() {
        return Err(Error::dataset("no training pairs".to_string()));
    }
    let mut rng = epoch_rng(config.train.seed, epoch);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    for i in (1..order.len()).rev() {
        let j = rand::Rng::random_range(&mut rng, 0..=i);
        order.swap(i, j);
    }
    let size = config.model.train_size;
    let mut batches = Vec::new();
    for chunk in order.chunks(config.train.batch_size.max(1)) {
        let mut data = Array4::zeros((chunk.len(), 3, size, size));
        let mut masks = Vec::with_capacity(chunk.len());
        for (slot, &idx) in chunk.iter().enumerate() {
            let ex = load_example(
                pairs[idx],
                &config.augment,
                size,
                &mut rng,
                config.augment.enabled,
            )?;
            data.index_axis_mut(ndarray::Axis(0), slot).assign(&ex.image);
            masks.push(ex.mask);
        }
        batches.push((ImageBatch::new(data)?, masks));
    }
    Ok(batches)
}

/// Mean Dice of eval-mode predictions against resize-only masks.
pub fn split_mdice(model: &MisNet, pairs: &[&ManifestPair], config: &RunConfig) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::dataset("no pairs to validate on".to_string()));
    }
    let size = config.model.train_size;
    let mut rng = ChaCha8Rng::seed_from_u64(0); // unused: identity plans only
    let mut acc = 0.0;
    for pair in pairs {
        let ex = load_example(pair, &config.augment, size, &mut rng, false)?;
        let batch = ImageBatch::new(ex.image.insert_axis(ndarray::Axis(0)))?;
        let prob = model.predict(&batch)?.remove(0);
        let (dice, _) = mdice_miou(&prob, &ex.mask, ThresholdMode::Fixed(0.5));
        acc += dice;
    }
    Ok(acc / pairs.len() as f64)
}

struct LogFile {
    file: std::fs::File,
    quiet: bool,
}

impl LogFile {
    fn line(&mut self, s: &str) -> Result<()> {
        writeln!(self.file, "{s}")?;
        if !self.quiet {
            println!("{s}");
        }
        Ok(())
    }
}

/// Runs (or resumes) the full loop and leaves `latest.ckpt`, `best.ckpt`,
/// `config.txt` and `train.log` under the output directory.
pub fn train(
    config: &RunConfig,
    manifest: &DatasetManifest,
    opts: &TrainOptions,
) -> Result<TrainSummary> {
    let config = &config.clone().validate()?;
    std::fs::create_dir_all(&opts.out_dir)?;
    // the resolved config lands on disk before any compute
    std::fs::write(opts.out_dir.join("config.txt"), config.to_text())?;
    let mut log = LogFile {
        file: std::fs::File::options()
            .create(true)
            .append(true)
            .open(opts.out_dir.join("train.log"))?,
        quiet: opts.quiet,
    };

    let train_pairs = manifest.pairs_for(Split::Train);
    let val_pairs = {
        let v = manifest.pairs_for(Split::Val);
        if v.is_empty() {
            log.line("note=empty_val_split_validating_on_train")?;
            manifest.pairs_for(Split::Train)
        } else {
            v
        }
    };

    let model = MisNet::new(&config.model, config.train.seed)?;
    if let Some(dir) = &opts.pretrained_dir {
        let n = crate::checkpoint::load_pretrained_backbone(&model, dir)?;
        log.line(&format!("pretrained_backbone_tensors={n}"))?;
    }
    let mut adam = Adam::new(model.registry().params(), config.train.weight_decay);

    let mut start_epoch = 0;
    let mut best_val = f64::NEG_INFINITY;
    let mut global_step: u64 = 0;
    if let Some(path) = &opts.resume {
        let ckpt = load_checkpoint(path)?;
        if !ckpt.matches(config) && !opts.force {
            return Err(Error::checkpoint(format!(
                "{} was written under a different config (hash {}); pass force to load anyway",
                path.display(),
                &ckpt.config_hash[..12.min(ckpt.config_hash.len())]
            )));
        }
        ckpt.apply(&model)?;
        if ckpt.has_optimizer() {
            ckpt.apply_optimizer(&mut adam)?;
        }
        start_epoch = ckpt.epoch + 1;
        best_val = ckpt.best_val_mdice.unwrap_or(f64::NEG_INFINITY);
        global_step = ckpt.global_step;
        log.line(&format!("resumed_from={} epoch={}", path.display(), ckpt.epoch))?;
    }

    let total_epochs = config.train.epochs;
    if start_epoch >= total_epochs {
        return Err(Error::config(format!(
            "nothing to do: resume epoch {start_epoch} >= total epochs {total_epochs}"
        )));
    }

    let mut epochs = Vec::with_capacity(total_epochs - start_epoch);
    let mut first_step_loss = None;
    let mut final_step_loss = 0.0;
    for epoch in start_epoch..total_epochs {
        let lr = poly_lr(epoch, total_epochs, config.train.base_lr, config.train.lr_power)?;
        let batches = epoch_batches(&train_pairs, config, epoch)?;
        let mut epoch_loss = 0.0;
        for (step, (batch, masks)) in batches.iter().enumerate() {
            let tape = Tape::new();
            let x = tape.constant(model.descriptor().normalize(batch));
            let outputs = model.forward(&tape, x, true);
            let (loss_var, report) = total_loss(&outputs, masks)?;
            adam.zero_grad();
            tape.backward(loss_var);
            clip_grad_norm(&model.registry().params(), config.train.grad_clip);
            adam.step(lr);
            global_step += 1;
            epoch_loss += report.total;
            first_step_loss.get_or_insert(report.total);
            final_step_loss = report.total;
            log.line(&format!(
                "epoch={epoch} step={step} global_step={global_step} lr={lr:.6e} \
                 total={:.6} fuse={:.6} l5={:.6} l4={:.6} l3={:.6}",
                report.total, report.fuse, report.l5, report.l4, report.l3
            ))?;
        }
        let mean_total = epoch_loss / batches.len() as f64;
        let val_mdice = split_mdice(&model, &val_pairs, config)?;
        log.line(&format!(
            "epoch={epoch} mean_total={mean_total:.6} val_mdice={val_mdice:.6}"
        ))?;
        epochs.push(EpochLog { epoch, lr, mean_total, val_mdice });

        let best_now = val_mdice > best_val;
        if best_now {
            best_val = val_mdice;
        }
        save_checkpoint(
            &opts.out_dir.join("latest.ckpt"),
            &model,
            config,
            epoch,
            global_step,
            Some(best_val),
            Some(&adam),
        )?;
        if best_now {
            save_checkpoint(
                &opts.out_dir.join("best.ckpt"),
                &model,
                config,
                epoch,
                global_step,
                Some(best_val),
                Some(&adam),
            )?;
        }
    }
    Ok(TrainSummary {
        epochs,
        first_step_loss: first_step_loss.unwrap_or(f64::NAN),
        final_step_loss,
        best_val_mdice: best_val,
        global_steps: global_step,
    })
}

/// Loads a checkpoint into a freshly built model, checking the config hash.
pub fn restore_model(path: &Path, config: &RunConfig, force: bool) -> Result<MisNet> {
    let ckpt = load_checkpoint(path)?;
    if !ckpt.matches(config) && !force {
        return Err(Error::checkpoint(format!(
            "{} was written under a different config; pass force to load anyway",
            path.display()
        )));
    }
    let model = MisNet::new(&config.model, config.train.seed)?;
    ckpt.apply(&model)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::datapipe::{build_manifest, generate_blob_dataset};

    fn tiny_config(epochs: usize, batch_size: usize) -> RunConfig {
        let mut rc = RunConfig::default();
        rc.model = ModelConfig {
            backbone_id: "toy".to_string(),
            train_size: 32,
            ..ModelConfig::default()
        };
        rc.train.epochs = epochs;
        rc.train.batch_size = batch_size;
        rc.train.base_lr = 1e-3;
        rc.augment.enabled = false;
        rc
    }

    #[test]
    fn batches_are_deterministic_in_config_and_epoch() {
        let dir = tempfile::tempdir().unwrap();
        generate_blob_dataset(dir.path(), 6, 40, 3).unwrap();
        let manifest = build_manifest(dir.path(), 1).unwrap();
        let mut rc = tiny_config(1, 2);
        rc.augment.enabled = true;
        let pairs = manifest.pairs_for(Split::Train);

        let a = epoch_batches(&pairs, &rc, 0).unwrap();
        let b = epoch_batches(&pairs, &rc, 0).unwrap();
        assert_eq!(a.len(), b.len());
        for ((ba, ma), (bb, mb)) in a.iter().zip(&b) {
            assert_eq!(ba.data(), bb.data());
            for (x, y) in ma.iter().zip(mb) {
                assert_eq!(x.data(), y.data());
            }
        }
        // another epoch shuffles differently or augments differently
        let c = epoch_batches(&pairs, &rc, 1).unwrap();
        assert!(a.iter().zip(&c).any(|((ba, _), (bc, _))| ba.data() != bc.data()));
    }

    #[test]
    fn two_short_runs_produce_identical_logs() {
        let data = tempfile::tempdir().unwrap();
        generate_blob_dataset(data.path(), 5, 40, 7).unwrap();
        let manifest = build_manifest(data.path(), 2).unwrap();
        let rc = tiny_config(2, 4);

        let run = || {
            let out = tempfile::tempdir().unwrap();
            train(&rc, &manifest, &TrainOptions::new(out.path())).unwrap()
        };
        let s1 = run();
        let s2 = run();
        assert_eq!(s1.final_step_loss.to_bits(), s2.final_step_loss.to_bits());
        assert_eq!(s1.first_step_loss.to_bits(), s2.first_step_loss.to_bits());
        assert_eq!(s1.best_val_mdice.to_bits(), s2.best_val_mdice.to_bits());
        assert_eq!(s1.epochs.len(), 2);
    }

    #[test]
    fn resume_continues_from_latest() {
        let data = tempfile::tempdir().unwrap();
        generate_blob_dataset(data.path(), 5, 40, 9).unwrap();
        let manifest = build_manifest(data.path(), 2).unwrap();
        let out_full = tempfile::tempdir().unwrap();
        let out_half = tempfile::tempdir().unwrap();

        let rc2 = tiny_config(2, 4);
        let full = train(&rc2, &manifest, &TrainOptions::new(out_full.path())).unwrap();

        let rc1 = tiny_config(1, 4);
        train(&rc1, &manifest, &TrainOptions::new(out_half.path())).unwrap();
        // continue the 1-epoch run under the 2-epoch config; hash differs
        // (epochs is part of the config) so force is required
        let mut opts = TrainOptions::new(out_half.path());
        opts.resume = Some(out_half.path().join("latest.ckpt"));
        assert!(train(&rc2, &manifest, &opts).is_err());
        opts.force = true;
        let resumed = train(&rc2, &manifest, &opts).unwrap();
        assert_eq!(resumed.epochs.len(), 1);
        assert_eq!(resumed.epochs[0].epoch, 1);
        // same batches, same optimizer state, same arithmetic: bitwise equal
        assert_eq!(full.final_step_loss.to_bits(), resumed.final_step_loss.to_bits());

        assert!(out_half.path().join("latest.ckpt").is_file());
        assert!(out_half.path().join("best.ckpt").is_file());
        assert!(out_half.path().join("config.txt").is_file());
        let log = std::fs::read_to_string(out_half.path().join("train.log")).unwrap();
        assert!(log.contains("epoch=1"), "{log}");
    }
}

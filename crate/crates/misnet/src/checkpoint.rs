//! Versioned weight container.
//!
//! Layout, little-endian throughout: an 8-byte magic, a u32 format version,
//! a u64 JSON-metadata length, the metadata, then every tensor's f64 values
//! back to back in metadata order (optimizer moments last). The metadata
//! embeds the resolved run config and its hash, so a checkpoint refuses to
//! load into a differently-configured model unless forced.

use crate::config::RunConfig;
use crate::decoder::MisNet;
use crate::error::{Error, Result};
use crate::nn::Adam;
use crate::tensor::ArrayD;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::IxDyn;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"MISNCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    kind: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Meta {
    config_hash: String,
    config_text: String,
    epoch: usize,
    global_step: u64,
    best_val_mdice: Option<f64>,
    tensors: Vec<TensorMeta>,
    optimizer_t: Option<u64>,
}

/// A loaded checkpoint: config identity, progress counters, and raw tensors.
#[derive(Debug)]
pub struct Checkpoint {
    pub config_hash: String,
    pub config_text: String,
    pub epoch: usize,
    pub global_step: u64,
    pub best_val_mdice: Option<f64>,
    tensors: Vec<(TensorMeta, ArrayD)>,
    optimizer: Option<(u64, Vec<ArrayD>, Vec<ArrayD>)>,
}

/// Hex SHA-256 of the resolved config text.
pub fn config_hash(config: &RunConfig) -> String {
    let mut h = Sha256::new();
    h.update(config.to_text().as_bytes());
    let digest = h.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn write_array(w: &mut impl Write, a: &ArrayD) -> Result<()> {
    for &v in a.iter() {
        w.write_f64::<LittleEndian>(v)?;
    }
    Ok(())
}

fn read_array(r: &mut impl Read, shape: &[usize]) -> Result<ArrayD> {
    let n: usize = shape.iter().product();
    let mut values = vec![0f64; n];
    r.read_f64_into::<LittleEndian>(&mut values)?;
    ArrayD::from_shape_vec(IxDyn(shape), values)
        .map_err(|e| Error::checkpoint(format!("bad tensor shape {shape:?}: {e}")))
}

/// Writes model weights, batch-norm buffers, progress counters, and
/// (optionally) Adam moments.
pub fn save_checkpoint(
    path: &Path,
    model: &MisNet,
    config: &RunConfig,
    epoch: usize,
    global_step: u64,
    best_val_mdice: Option<f64>,
    optimizer: Option<&Adam>,
) -> Result<()> {
    let params = model.registry().params();
    let buffers = model.registry().buffers();
    let mut tensors = Vec::with_capacity(params.len() + buffers.len());
    for p in &params {
        tensors.push(TensorMeta {
            name: p.name().to_string(),
            kind: "param".to_string(),
            shape: p.shape(),
        });
    }
    for b in &buffers {
        tensors.push(TensorMeta {
            name: b.name().to_string(),
            kind: "buffer".to_string(),
            shape: b.value().shape().to_vec(),
        });
    }
    let meta = Meta {
        config_hash: config_hash(config),
        config_text: config.to_text(),
        epoch,
        global_step,
        best_val_mdice,
        tensors,
        optimizer_t: optimizer.map(|o| o.state().0),
    };
    let meta_bytes = serde_json::to_vec(&meta)?;

    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    w.write_u64::<LittleEndian>(meta_bytes.len() as u64)?;
    w.write_all(&meta_bytes)?;
    for p in &params {
        write_array(&mut w, &p.value().to_owned())?;
    }
    for b in &buffers {
        write_array(&mut w, &b.value())?;
    }
    if let Some(adam) = optimizer {
        let (_, m, v) = adam.state();
        for a in m {
            write_array(&mut w, a)?;
        }
        for a in v {
            write_array(&mut w, a)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a checkpoint; validates the magic and format version.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::checkpoint(format!("cannot open {}: {e}", path.display())))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::checkpoint(format!("{} is not a checkpoint", path.display())));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(Error::checkpoint(format!(
            "unsupported checkpoint version {version}, expected {VERSION}"
        )));
    }
    let meta_len = r.read_u64::<LittleEndian>()? as usize;
    let mut meta_bytes = vec![0u8; meta_len];
    r.read_exact(&mut meta_bytes)?;
    let meta: Meta = serde_json::from_slice(&meta_bytes)?;

    let mut tensors = Vec::with_capacity(meta.tensors.len());
    for tm in &meta.tensors {
        let arr = read_array(&mut r, &tm.shape)?;
        tensors.push((tm.clone(), arr));
    }
    let optimizer = match meta.optimizer_t {
        None => None,
        Some(t) => {
            let param_shapes: Vec<Vec<usize>> = meta
                .tensors
                .iter()
                .filter(|tm| tm.kind == "param")
                .map(|tm| tm.shape.clone())
                .collect();
            let mut m = Vec::with_capacity(param_shapes.len());
            for s in &param_shapes {
                m.push(read_array(&mut r, s)?);
            }
            let mut v = Vec::with_capacity(param_shapes.len());
            for s in &param_shapes {
                v.push(read_array(&mut r, s)?);
            }
            Some((t, m, v))
        }
    };
    Ok(Checkpoint {
        config_hash: meta.config_hash,
        config_text: meta.config_text,
        epoch: meta.epoch,
        global_step: meta.global_step,
        best_val_mdice: meta.best_val_mdice,
        tensors,
        optimizer,
    })
}

impl Checkpoint {
    /// Whether this checkpoint was written under exactly this config.
    pub fn matches(&self, config: &RunConfig) -> bool {
        self.config_hash == config_hash(config)
    }

    /// The run config the checkpoint was written under.
    pub fn config(&self) -> Result<RunConfig> {
        RunConfig::parse(&self.config_text)
    }

    pub fn has_optimizer(&self) -> bool {
        self.optimizer.is_some()
    }

    /// Copies every stored tensor into the model, strict in both directions:
    /// a missing or extra or reshaped tensor is an error.
    pub fn apply(&self, model: &MisNet) -> Result<()> {
        let params = model.registry().params();
        let buffers = model.registry().buffers();
        let mut remaining: std::collections::BTreeMap<&str, &(TensorMeta, ArrayD)> =
            self.tensors.iter().map(|t| (t.0.name.as_str(), t)).collect();
        for p in &params {
            let (tm, arr) = remaining
                .remove(p.name())
                .ok_or_else(|| Error::checkpoint(format!("checkpoint lacks tensor {}", p.name())))?;
            if tm.shape != p.shape() {
                return Err(Error::checkpoint(format!(
                    "tensor {} is {:?} in the checkpoint but {:?} in the model",
                    tm.name,
                    tm.shape,
                    p.shape()
                )));
            }
            p.set_value(arr.clone());
        }
        for b in &buffers {
            let (tm, arr) = remaining
                .remove(b.name())
                .ok_or_else(|| Error::checkpoint(format!("checkpoint lacks buffer {}", b.name())))?;
            if tm.shape != b.value().shape() {
                return Err(Error::checkpoint(format!(
                    "buffer {} is {:?} in the checkpoint but {:?} in the model",
                    tm.name,
                    tm.shape,
                    b.value().shape()
                )));
            }
            b.set_value(arr.clone());
        }
        if let Some((name, _)) = remaining.pop_first() {
            return Err(Error::checkpoint(format!(
                "checkpoint tensor {name} has no destination in the model"
            )));
        }
        Ok(())
    }

    /// Restores Adam moments saved alongside the weights.
    pub fn apply_optimizer(&self, adam: &mut Adam) -> Result<()> {
        let Some((t, m, v)) = &self.optimizer else {
            return Err(Error::checkpoint("checkpoint holds no optimizer state".to_string()));
        };
        adam.load_state(*t, m.clone(), v.clone());
        Ok(())
    }
}

/// Writes only the backbone tensors, for reuse across runs.
pub fn save_backbone_weights(path: &Path, model: &MisNet, config: &RunConfig) -> Result<()> {
    // write a full checkpoint, then thin it on load; simpler than a second
    // format, and backbone extraction filters by name prefix anyway
    save_checkpoint(path, model, config, 0, 0, None, None)
}

/// Loads `backbone.*` tensors from `<dir>/<backbone_id>.ckpt` into the
/// model. Returns how many tensors were copied.
pub fn load_pretrained_backbone(model: &MisNet, dir: &Path) -> Result<usize> {
    let id = &model.descriptor().id;
    let path = dir.join(format!("{id}.ckpt"));
    if !path.is_file() {
        return Err(Error::checkpoint(format!(
            "no pretrained weights for backbone {id} at {}",
            path.display()
        )));
    }
    let ckpt = load_checkpoint(&path)?;
    let stored: std::collections::BTreeMap<&str, &(TensorMeta, ArrayD)> = ckpt
        .tensors
        .iter()
        .filter(|t| t.0.name.starts_with("backbone."))
        .map(|t| (t.0.name.as_str(), t))
        .collect();
    let mut copied = 0;
    for p in model.registry().params() {
        if !p.name().starts_with("backbone.") {
            continue;
        }
        let (tm, arr) = stored.get(p.name()).ok_or_else(|| {
            Error::checkpoint(format!("pretrained file lacks tensor {}", p.name()))
        })?;
        if tm.shape != p.shape() {
            return Err(Error::checkpoint(format!(
                "pretrained tensor {} is {:?}, model wants {:?}",
                tm.name,
                tm.shape,
                p.shape()
            )));
        }
        p.set_value((*arr).clone());
        copied += 1;
    }
    for b in model.registry().buffers() {
        if !b.name().starts_with("backbone.") {
            continue;
        }
        let (tm, arr) = stored.get(b.name()).ok_or_else(|| {
            Error::checkpoint(format!("pretrained file lacks buffer {}", b.name()))
        })?;
        if tm.shape != b.value().shape() {
            return Err(Error::checkpoint(format!(
                "pretrained buffer {} is {:?}, model wants {:?}",
                tm.name,
                tm.shape,
                b.value().shape()
            )));
        }
        b.set_value((*arr).clone());
        copied += 1;
    }
    Ok(copied)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;

    fn toy_run_config() -> RunConfig {
        let mut rc = RunConfig::default();
        rc.model = ModelConfig { backbone_id: "toy".to_string(), ..ModelConfig::default() };
        rc
    }

    #[test]
    fn round_trip_restores_everything() {
        let rc = toy_run_config();
        let model = MisNet::new(&rc.model, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt/latest.ckpt");

        let mut adam = Adam::new(model.registry().params(), 0.0);
        // take one optimizer step so the moments are nonzero
        for p in model.registry().params() {
            p.set_grad(ArrayD::ones(IxDyn(&p.shape())));
        }
        adam.step(1e-3);
        save_checkpoint(&path, &model, &rc, 7, 123, Some(0.5), Some(&adam)).unwrap();

        let model2 = MisNet::new(&rc.model, 2).unwrap();
        // seeds differ, so at least one tensor differs before loading
        let differs = model
            .registry()
            .params()
            .iter()
            .zip(model2.registry().params())
            .any(|(a, b)| a.value() != b.value());
        assert!(differs);

        let ckpt = load_checkpoint(&path).unwrap();
        assert_eq!(ckpt.epoch, 7);
        assert_eq!(ckpt.global_step, 123);
        assert_eq!(ckpt.best_val_mdice, Some(0.5));
        assert!(ckpt.matches(&rc));
        ckpt.apply(&model2).unwrap();
        for (a, b) in model.registry().params().iter().zip(model2.registry().params()) {
            assert_eq!(a.value(), b.value(), "{}", a.name());
        }
        for (a, b) in model.registry().buffers().iter().zip(model2.registry().buffers()) {
            assert_eq!(a.value(), b.value(), "{}", a.name());
        }
        let mut adam2 = Adam::new(model2.registry().params(), 0.0);
        ckpt.apply_optimizer(&mut adam2).unwrap();
        let (t1, m1, v1) = adam.state();
        let (t2, m2, v2) = adam2.state();
        assert_eq!(t1, t2);
        assert_eq!(m1, m2);
        assert_eq!(v1, v2);
        assert_eq!(ckpt.config().unwrap().to_text(), rc.to_text());
    }

    #[test]
    fn config_mismatch_is_detected() {
        let rc = toy_run_config();
        let model = MisNet::new(&rc.model, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("latest.ckpt");
        save_checkpoint(&path, &model, &rc, 0, 0, None, None).unwrap();
        let ckpt = load_checkpoint(&path).unwrap();

        let mut other = rc.clone();
        other.train.seed = 99;
        assert!(!ckpt.matches(&other));
        assert!(ckpt.matches(&rc));

        // an architecturally different model refuses the tensors outright
        let mut ab_cfg = rc.model.clone();
        ab_cfg.use_bwm = false;
        let ab = MisNet::new(&ab_cfg, 1).unwrap();
        let err = ckpt.apply(&ab);
        assert!(err.is_err());
    }

    #[test]
    fn rejects_foreign_files_and_versions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"NOTACKPTxxxxxxxxxxxx").unwrap();
        let err = load_checkpoint(&path).unwrap_err().to_string();
        assert!(err.contains("not a checkpoint"), "{err}");
    }

    #[test]
    fn pretrained_backbone_loads_by_id() {
        let rc = toy_run_config();
        let donor = MisNet::new(&rc.model, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_backbone_weights(&dir.path().join("toy.ckpt"), &donor, &rc).unwrap();

        let target = MisNet::new(&rc.model, 6).unwrap();
        let before: Vec<ArrayD> =
            target.registry().params().iter().map(|p| p.value().to_owned()).collect();
        let copied = load_pretrained_backbone(&target, dir.path()).unwrap();
        assert!(copied > 0);
        for ((a, b), pre) in
            donor.registry().params().iter().zip(target.registry().params()).zip(&before)
        {
            if a.name().starts_with("backbone.") {
                assert_eq!(a.value(), b.value(), "{}", a.name());
            } else {
                assert_eq!(
                    b.value().to_owned(),
                    *pre,
                    "{} should stay at its own init",
                    a.name()
                );
            }
        }
        // missing file names the backbone
        let empty = tempfile::tempdir().unwrap();
        let err = load_pretrained_backbone(&target, empty.path()).unwrap_err().to_string();
        assert!(err.contains("toy"), "{err}");
    }

    use ndarray::IxDyn;
    use crate::tensor::ArrayD;
}

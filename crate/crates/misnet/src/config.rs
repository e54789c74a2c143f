//! Model/run configuration, the flat `key = value` text format, and the
//! ablation variant table.

use crate::error::{Error, Result};
use std::fmt::Write as _;

/// Architecture hyper-parameters and ablation switches.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub backbone_id: String,
    /// Channel width C used throughout fusion/attention/decoding.
    pub squeeze_channels: usize,
    /// Reduction ratio r of the selection branch.
    pub reduction_ratio: usize,
    /// Floor L on the reduced dimension.
    pub min_reduced_dim: usize,
    pub use_lfm_ssfm: bool,
    pub use_lfm_bwm: bool,
    pub use_hfm: bool,
    pub use_ssfm: bool,
    pub use_pam: bool,
    pub use_pa_ra: bool,
    pub use_pa_ba: bool,
    pub use_bwm: bool,
    pub train_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone_id: "res2net".to_string(),
            squeeze_channels: 32,
            reduction_ratio: 4,
            min_reduced_dim: 16,
            use_lfm_ssfm: true,
            use_lfm_bwm: true,
            use_hfm: true,
            use_ssfm: true,
            use_pam: true,
            use_pa_ra: true,
            use_pa_ba: true,
            use_bwm: true,
            train_size: 352,
        }
    }
}

/// Reduced dimension d = max(ceil(C/r), L).
pub fn reduced_dim(c: usize, r: usize, l: usize) -> usize {
    c.div_ceil(r).max(l)
}

/// Checks every ModelConfig invariant, returning the config unchanged.
pub fn validate_config(cfg: ModelConfig) -> Result<ModelConfig> {
    if cfg.backbone_id.is_empty() {
        return Err(Error::config("backbone_id must be non-empty"));
    }
    if cfg.squeeze_channels < 1 {
        return Err(Error::config("C must be >= 1"));
    }
    if cfg.reduction_ratio < 1 {
        return Err(Error::config("r must be >= 1"));
    }
    if cfg.min_reduced_dim < 1 {
        return Err(Error::config("L must be >= 1"));
    }
    if cfg.train_size == 0 || cfg.train_size % 32 != 0 {
        return Err(Error::config(format!(
            "train_size {} not divisible by 32",
            cfg.train_size
        )));
    }
    if cfg.use_pam && !cfg.use_pa_ra && !cfg.use_pa_ba {
        return Err(Error::config(
            "use_pam requires at least one of use_pa_ra / use_pa_ba",
        ));
    }
    if cfg.use_pam && cfg.use_pa_ra && cfg.use_pa_ba && cfg.squeeze_channels % 2 != 0 {
        return Err(Error::config(
            "two-branch attention splits C in half; C must be even",
        ));
    }
    if !cfg.use_lfm_ssfm && !cfg.use_hfm {
        return Err(Error::config(
            "at least one of use_lfm_ssfm / use_hfm must be enabled to form the guidance map",
        ));
    }
    if cfg.use_ssfm && !(cfg.use_lfm_ssfm && cfg.use_hfm) {
        return Err(Error::config(
            "use_ssfm needs both fusion branches (use_lfm_ssfm and use_hfm)",
        ));
    }
    Ok(cfg)
}

/// Optimization schedule knobs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub lr_power: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            batch_size: 16,
            base_lr: 1e-5,
            weight_decay: 1e-5,
            grad_clip: 0.5,
            lr_power: 0.9,
            seed: 3407,
        }
    }
}

/// Training-time augmentation switches and parameter ranges.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationConfig {
    pub enabled: bool,
    pub scale_min: f64,
    pub scale_max: f64,
    /// Square crop side after scaling; None disables cropping.
    pub crop: Option<usize>,
    pub flip_prob: f64,
    pub noise_std_max: f64,
    pub contrast_min: f64,
    pub contrast_max: f64,
    pub brightness_min: f64,
    pub brightness_max: f64,
    pub sharpness_min: f64,
    pub sharpness_max: f64,
    pub morph_prob: f64,
    pub morph_kernel_min: usize,
    pub morph_kernel_max: usize,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            enabled: true,
            scale_min: 0.75,
            scale_max: 1.25,
            crop: None,
            flip_prob: 0.5,
            noise_std_max: 0.05,
            contrast_min: 0.8,
            contrast_max: 1.2,
            brightness_min: 0.8,
            brightness_max: 1.2,
            sharpness_min: 0.8,
            sharpness_max: 1.2,
            morph_prob: 0.5,
            morph_kernel_min: 2,
            morph_kernel_max: 5,
        }
    }
}

impl AugmentationConfig {
    /// Resize-only pipeline (every op disabled).
    pub fn disabled() -> Self {
        AugmentationConfig {
            enabled: false,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob_ok = |p: f64| (0.0..=1.0).contains(&p);
        if !prob_ok(self.flip_prob) || !prob_ok(self.morph_prob) {
            return Err(Error::config("probabilities must lie in [0,1]"));
        }
        if self.scale_min <= 0.0 || self.scale_min > self.scale_max {
            return Err(Error::config("scale range must satisfy 0 < min <= max"));
        }
        if self.noise_std_max < 0.0 {
            return Err(Error::config("noise std must be >= 0"));
        }
        for (lo, hi, name) in [
            (self.contrast_min, self.contrast_max, "contrast"),
            (self.brightness_min, self.brightness_max, "brightness"),
            (self.sharpness_min, self.sharpness_max, "sharpness"),
        ] {
            if lo <= 0.0 || lo > hi {
                return Err(Error::config(format!("{name} range must satisfy 0 < min <= max")));
            }
        }
        if self.morph_kernel_min < 2
            || self.morph_kernel_max > 5
            || self.morph_kernel_min > self.morph_kernel_max
        {
            return Err(Error::config("morphology kernel range must lie within [2,5]"));
        }
        if self.crop == Some(0) {
            return Err(Error::config("crop must be >= 1"));
        }
        Ok(())
    }
}

/// Everything one run needs: model, schedule, augmentation.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub augment: AugmentationConfig,
}

impl RunConfig {
    pub fn validate(self) -> Result<RunConfig> {
        let model = validate_config(self.model)?;
        if self.train.epochs == 0 {
            return Err(Error::config("epochs must be >= 1"));
        }
        if self.train.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if !(self.train.base_lr > 0.0) {
            return Err(Error::config("base_lr must be > 0"));
        }
        if self.train.weight_decay < 0.0 || self.train.grad_clip < 0.0 {
            return Err(Error::config("weight_decay and grad_clip must be >= 0"));
        }
        self.augment.validate()?;
        Ok(RunConfig { model, ..self })
    }

    /// Serializes to the flat `key = value` text format.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let a = &self.augment;
        let mut s = String::new();
        let _ = writeln!(s, "# model");
        let _ = writeln!(s, "backbone_id = {}", m.backbone_id);
        let _ = writeln!(s, "C = {}", m.squeeze_channels);
        let _ = writeln!(s, "r = {}", m.reduction_ratio);
        let _ = writeln!(s, "L = {}", m.min_reduced_dim);
        let _ = writeln!(s, "use_lfm_ssfm = {}", m.use_lfm_ssfm);
        let _ = writeln!(s, "use_lfm_bwm = {}", m.use_lfm_bwm);
        let _ = writeln!(s, "use_hfm = {}", m.use_hfm);
        let _ = writeln!(s, "use_ssfm = {}", m.use_ssfm);
        let _ = writeln!(s, "use_pam = {}", m.use_pam);
        let _ = writeln!(s, "use_pa_ra = {}", m.use_pa_ra);
        let _ = writeln!(s, "use_pa_ba = {}", m.use_pa_ba);
        let _ = writeln!(s, "use_bwm = {}", m.use_bwm);
        let _ = writeln!(s, "train_size = {}", m.train_size);
        let _ = writeln!(s, "# schedule");
        let _ = writeln!(s, "epochs = {}", t.epochs);
        let _ = writeln!(s, "batch_size = {}", t.batch_size);
        let _ = writeln!(s, "base_lr = {}", t.base_lr);
        let _ = writeln!(s, "weight_decay = {}", t.weight_decay);
        let _ = writeln!(s, "grad_clip = {}", t.grad_clip);
        let _ = writeln!(s, "lr_power = {}", t.lr_power);
        let _ = writeln!(s, "seed = {}", t.seed);
        let _ = writeln!(s, "# augmentation");
        let _ = writeln!(s, "aug_enabled = {}", a.enabled);
        let _ = writeln!(s, "aug_scale_min = {}", a.scale_min);
        let _ = writeln!(s, "aug_scale_max = {}", a.scale_max);
        let crop = match a.crop {
            Some(c) => c.to_string(),
            None => "none".to_string(),
        };
        let _ = writeln!(s, "aug_crop = {crop}");
        let _ = writeln!(s, "aug_flip_prob = {}", a.flip_prob);
        let _ = writeln!(s, "aug_noise_std_max = {}", a.noise_std_max);
        let _ = writeln!(s, "aug_contrast_min = {}", a.contrast_min);
        let _ = writeln!(s, "aug_contrast_max = {}", a.contrast_max);
        let _ = writeln!(s, "aug_brightness_min = {}", a.brightness_min);
        let _ = writeln!(s, "aug_brightness_max = {}", a.brightness_max);
        let _ = writeln!(s, "aug_sharpness_min = {}", a.sharpness_min);
        let _ = writeln!(s, "aug_sharpness_max = {}", a.sharpness_max);
        let _ = writeln!(s, "aug_morph_prob = {}", a.morph_prob);
        let _ = writeln!(s, "aug_morph_kernel_min = {}", a.morph_kernel_min);
        let _ = writeln!(s, "aug_morph_kernel_max = {}", a.morph_kernel_max);
        s
    }

    /// Parses the text format. Missing keys keep their defaults; unknown keys
    /// are an error so typos fail loudly.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            let bad = |what: &str| {
                Error::config(format!("line {}: {key}: invalid {what} `{value}`", lineno + 1))
            };
            macro_rules! set {
                ($field:expr, usize) => {
                    $field = value.parse::<usize>().map_err(|_| bad("integer"))?
                };
                ($field:expr, u64) => {
                    $field = value.parse::<u64>().map_err(|_| bad("integer"))?
                };
                ($field:expr, f64) => {
                    $field = value.parse::<f64>().map_err(|_| bad("number"))?
                };
                ($field:expr, bool) => {
                    $field = value.parse::<bool>().map_err(|_| bad("boolean"))?
                };
            }
            match key {
                "backbone_id" => cfg.model.backbone_id = value.to_string(),
                "C" => set!(cfg.model.squeeze_channels, usize),
                "r" => set!(cfg.model.reduction_ratio, usize),
                "L" => set!(cfg.model.min_reduced_dim, usize),
                "use_lfm_ssfm" => set!(cfg.model.use_lfm_ssfm, bool),
                "use_lfm_bwm" => set!(cfg.model.use_lfm_bwm, bool),
                "use_hfm" => set!(cfg.model.use_hfm, bool),
                "use_ssfm" => set!(cfg.model.use_ssfm, bool),
                "use_pam" => set!(cfg.model.use_pam, bool),
                "use_pa_ra" => set!(cfg.model.use_pa_ra, bool),
                "use_pa_ba" => set!(cfg.model.use_pa_ba, bool),
                "use_bwm" => set!(cfg.model.use_bwm, bool),
                "train_size" => set!(cfg.model.train_size, usize),
                "epochs" => set!(cfg.train.epochs, usize),
                "batch_size" => set!(cfg.train.batch_size, usize),
                "base_lr" => set!(cfg.train.base_lr, f64),
                "weight_decay" => set!(cfg.train.weight_decay, f64),
                "grad_clip" => set!(cfg.train.grad_clip, f64),
                "lr_power" => set!(cfg.train.lr_power, f64),
                "seed" => set!(cfg.train.seed, u64),
                "aug_enabled" => set!(cfg.augment.enabled, bool),
                "aug_scale_min" => set!(cfg.augment.scale_min, f64),
                "aug_scale_max" => set!(cfg.augment.scale_max, f64),
                "aug_crop" => {
                    cfg.augment.crop = if value == "none" {
                        None
                    } else {
                        Some(value.parse::<usize>().map_err(|_| bad("crop"))?)
                    }
                }
                "aug_flip_prob" => set!(cfg.augment.flip_prob, f64),
                "aug_noise_std_max" => set!(cfg.augment.noise_std_max, f64),
                "aug_contrast_min" => set!(cfg.augment.contrast_min, f64),
                "aug_contrast_max" => set!(cfg.augment.contrast_max, f64),
                "aug_brightness_min" => set!(cfg.augment.brightness_min, f64),
                "aug_brightness_max" => set!(cfg.augment.brightness_max, f64),
                "aug_sharpness_min" => set!(cfg.augment.sharpness_min, f64),
                "aug_sharpness_max" => set!(cfg.augment.sharpness_max, f64),
                "aug_morph_prob" => set!(cfg.augment.morph_prob, f64),
                "aug_morph_kernel_min" => set!(cfg.augment.morph_kernel_min, usize),
                "aug_morph_kernel_max" => set!(cfg.augment.morph_kernel_max, usize),
                _ => return Err(Error::config(format!("line {}: unknown key `{key}`", lineno + 1))),
            }
        }
        Ok(cfg)
    }
}

/// Named architecture ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AblationVariant {
    Full,
    WoLfm1,
    WoLfm2,
    WoHfm,
    WoSsfm,
    WoPam,
    PaRaOnly,
    PaBaOnly,
    WoBwm,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 9] = [
        AblationVariant::Full,
        AblationVariant::WoLfm1,
        AblationVariant::WoLfm2,
        AblationVariant::WoHfm,
        AblationVariant::WoSsfm,
        AblationVariant::WoPam,
        AblationVariant::PaRaOnly,
        AblationVariant::PaBaOnly,
        AblationVariant::WoBwm,
    ];

    /// The eight non-baseline variants.
    pub const ABLATIONS: [AblationVariant; 8] = [
        AblationVariant::WoLfm1,
        AblationVariant::WoLfm2,
        AblationVariant::WoHfm,
        AblationVariant::WoSsfm,
        AblationVariant::WoPam,
        AblationVariant::PaRaOnly,
        AblationVariant::PaBaOnly,
        AblationVariant::WoBwm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationVariant::Full => "full",
            AblationVariant::WoLfm1 => "wo_lfm1",
            AblationVariant::WoLfm2 => "wo_lfm2",
            AblationVariant::WoHfm => "wo_hfm",
            AblationVariant::WoSsfm => "wo_ssfm",
            AblationVariant::WoPam => "wo_pam",
            AblationVariant::PaRaOnly => "pa_ra_only",
            AblationVariant::PaBaOnly => "pa_ba_only",
            AblationVariant::WoBwm => "wo_bwm",
        }
    }

    pub fn from_name(name: &str) -> Result<AblationVariant> {
        AblationVariant::ALL
            .into_iter()
            .find(|v| v.name() == name)
            .ok_or_else(|| Error::config(format!("unknown ablation variant `{name}`")))
    }

    /// Applies the variant's flag settings to a base config.
    pub fn apply(self, base: &ModelConfig) -> ModelConfig {
        let mut cfg = base.clone();
        match self {
            AblationVariant::Full => {}
            AblationVariant::WoLfm1 => {
                cfg.use_lfm_ssfm = false;
                cfg.use_ssfm = false;
            }
            AblationVariant::WoLfm2 => cfg.use_lfm_bwm = false,
            AblationVariant::WoHfm => {
                cfg.use_hfm = false;
                cfg.use_ssfm = false;
            }
            AblationVariant::WoSsfm => cfg.use_ssfm = false,
            AblationVariant::WoPam => cfg.use_pam = false,
            AblationVariant::PaRaOnly => cfg.use_pa_ba = false,
            AblationVariant::PaBaOnly => cfg.use_pa_ra = false,
            AblationVariant::WoBwm => cfg.use_bwm = false,
        }
        cfg
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reduced_dim_examples() {
        assert_eq!(reduced_dim(64, 4, 16), 16);
        assert_eq!(reduced_dim(16, 4, 16), 16);
        assert_eq!(reduced_dim(256, 4, 16), 64);
        // ceil rounding keeps d positive
        assert_eq!(reduced_dim(1, 4, 1), 1);
        assert_eq!(reduced_dim(33, 4, 1), 9);
    }

    #[test]
    fn reduced_dim_floor_and_monotonicity() {
        for c in 1..200 {
            for r in 1..6 {
                assert!(reduced_dim(c, r, 16) >= 16);
                assert!(reduced_dim(c + 1, r, 16) >= reduced_dim(c, r, 16));
            }
        }
    }

    #[test]
    fn validate_accepts_defaults() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.squeeze_channels, 32);
        assert_eq!(cfg.reduction_ratio, 4);
        assert_eq!(cfg.min_reduced_dim, 16);
        assert_eq!(cfg.train_size, 352);
        validate_config(cfg).unwrap();
    }

    #[test]
    fn validate_rejects_bad_train_size() {
        let cfg = ModelConfig {
            train_size: 350,
            ..Default::default()
        };
        let err = validate_config(cfg).unwrap_err().to_string();
        assert!(err.contains("train_size"), "{err}");
    }

    #[test]
    fn validate_rejects_pam_without_branches() {
        let cfg = ModelConfig {
            use_pa_ra: false,
            use_pa_ba: false,
            ..Default::default()
        };
        assert!(validate_config(cfg).is_err());
    }

    #[test]
    fn roundtrip_default() {
        let cfg = RunConfig::default();
        let text = cfg.to_text();
        let parsed = RunConfig::parse(&text).unwrap();
        assert_eq!(cfg, parsed);
    }

    #[test]
    fn roundtrip_modified() {
        let mut cfg = RunConfig::default();
        cfg.model.backbone_id = "toy".into();
        cfg.model.squeeze_channels = 8;
        cfg.model.use_pa_ba = false;
        cfg.model.train_size = 64;
        cfg.train.epochs = 2;
        cfg.train.base_lr = 3.5e-4;
        cfg.augment.crop = Some(320);
        cfg.augment.enabled = false;
        let parsed = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(cfg, parsed);
    }

    #[test]
    fn parse_rejects_unknown_key() {
        assert!(RunConfig::parse("nonsense = 1\n").is_err());
    }

    #[test]
    fn parse_ignores_comments_and_blanks() {
        let cfg = RunConfig::parse("# hello\n\n  C = 16  \n").unwrap();
        assert_eq!(cfg.model.squeeze_channels, 16);
    }

    #[test]
    fn ablation_variants_match_table_semantics() {
        let base = ModelConfig::default();
        let v = AblationVariant::WoSsfm.apply(&base);
        assert!(!v.use_ssfm && v.use_lfm_ssfm && v.use_hfm);
        let v = AblationVariant::WoHfm.apply(&base);
        assert!(!v.use_hfm && !v.use_ssfm);
        let v = AblationVariant::WoLfm1.apply(&base);
        assert!(!v.use_lfm_ssfm && !v.use_ssfm);
        let v = AblationVariant::PaRaOnly.apply(&base);
        assert!(v.use_pa_ra && !v.use_pa_ba);
        let v = AblationVariant::PaBaOnly.apply(&base);
        assert!(!v.use_pa_ra && v.use_pa_ba);
        let v = AblationVariant::WoLfm2.apply(&base);
        assert!(!v.use_lfm_bwm && v.use_lfm_ssfm);
        for variant in AblationVariant::ALL {
            validate_config(variant.apply(&base)).unwrap();
            assert_eq!(AblationVariant::from_name(variant.name()).unwrap(), variant);
        }
        assert!(AblationVariant::from_name("wo_everything").is_err());
    }
}

//! Validated value types passed between pipeline stages.

use crate::error::{Error, Result};
use ndarray::{Array2, Array4};

/// Normalized network input: (batch, 3, H, W) with H, W divisible by 32.
#[derive(Debug, Clone)]
pub struct ImageBatch {
    data: Array4<f64>,
}

impl ImageBatch {
    pub fn new(data: Array4<f64>) -> Result<ImageBatch> {
        let (_, c, h, w) = data.dim();
        if c != 3 {
            return Err(Error::shape(format!("image batch needs 3 channels, got {c}")));
        }
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(Error::shape(format!(
                "image batch spatial dims ({h},{w}) must be divisible by 32"
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::shape("image batch contains non-finite values".to_string()));
        }
        Ok(ImageBatch { data })
    }

    pub fn data(&self) -> &Array4<f64> {
        &self.data
    }

    pub fn batch_size(&self) -> usize {
        self.data.dim().0
    }

    pub fn hw(&self) -> (usize, usize) {
        let (_, _, h, w) = self.data.dim();
        (h, w)
    }
}

/// Ground-truth mask with values exactly 0 or 1.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    data: Array2<f64>,
}

impl BinaryMask {
    pub fn new(data: Array2<f64>) -> Result<BinaryMask> {
        if data.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::shape("mask values must be exactly 0 or 1".to_string()));
        }
        Ok(BinaryMask { data })
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array2<f64> {
        self.data
    }

    pub fn foreground(&self) -> f64 {
        self.data.sum()
    }
}

/// Predicted per-pixel probability in [0,1].
#[derive(Debug, Clone)]
pub struct ProbMap {
    data: Array2<f64>,
}

impl ProbMap {
    pub fn new(data: Array2<f64>) -> Result<ProbMap> {
        if data.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::shape("probability values must lie in [0,1]".to_string()));
        }
        Ok(ProbMap { data })
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array2<f64> {
        self.data
    }
}

//! Training samples, coarse-mask supervision and dataset sources.

mod augment;
mod components;
mod imageio;
mod ingest;
mod saliency;
mod synth;

pub use augment::{augment, AugmentConfig};
pub use components::{connected_components, Components};
pub use imageio::{read_gray_png, read_mask_png, write_gray_png, write_mask_png};
pub use ingest::{ingest_qata, IngestOptions};
pub use saliency::{coarse_mask, BaselineSaliency, PerturbedSaliency, SaliencyBackend};
pub use synth::{synth_generate, LungGeometry, SynthConfig, SyntheticGenerator};

use serde::{Deserialize, Serialize};

use crate::attr_text::{AttributeDescription, AttributeLabels};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Binary `H×W` mask.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<u8>,
}

impl std::fmt::Debug for Mask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Mask({}x{}, {} on)",
            self.height,
            self.width,
            self.count()
        )
    }
}

impl Mask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            bits: vec![0; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(y, x) as u8);
            }
        }
        Mask {
            height,
            width,
            bits,
        }
    }

    /// Accepts a `1×H×W` or `H×W` tensor of exact 0/1 values.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (h, w) = match t.shape() {
            [1, h, w] | [h, w] => (*h, *w),
            s => return Err(Error::shape("Mask::from_tensor", "1xHxW", format!("{s:?}"))),
        };
        let mut bits = Vec::with_capacity(h * w);
        for &v in t.data() {
            if v == 0.0 {
                bits.push(0);
            } else if v == 1.0 {
                bits.push(1);
            } else {
                return Err(Error::shape("Mask::from_tensor", "binary values", v));
            }
        }
        Ok(Mask {
            height: h,
            width: w,
            bits,
        })
    }

    /// `1[values > threshold]` over a `1×H×W` tensor.
    pub fn threshold(t: &Tensor, threshold: f64) -> Result<Self> {
        let (c, h, w) = t.dims3()?;
        if c != 1 {
            return Err(Error::shape("Mask::threshold", 1, c));
        }
        Ok(Mask {
            height: h,
            width: w,
            bits: t.data().iter().map(|&v| (v > threshold) as u8).collect(),
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x] != 0
    }

    pub fn set(&mut self, y: usize, x: usize, on: bool) {
        self.bits[y * self.width + x] = on as u8;
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(
            &[1, self.height, self.width],
            self.bits.iter().map(|&b| b as f64).collect(),
        )
        .expect("mask dims")
    }

    pub fn union(&self, other: &Mask) -> Mask {
        Mask {
            height: self.height,
            width: self.width,
            bits: self
                .bits
                .iter()
                .zip(&other.bits)
                .map(|(a, b)| a | b)
                .collect(),
        }
    }

    pub fn same_shape(&self, other: &Mask) -> bool {
        self.height == other.height && self.width == other.width
    }
}

/// One training record.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTextSample {
    pub id: String,
    /// `1×H×W`, values in `[0, 1]`.
    pub image: Tensor,
    pub raw_text: String,
    pub attr_description: AttributeDescription,
    pub attr_labels: AttributeLabels,
    pub coarse_mask: Mask,
    /// Evaluation only; never read by any loss.
    pub gt_mask: Option<Mask>,
}

impl ImageTextSample {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
}

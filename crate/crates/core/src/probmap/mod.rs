//! Per-view branch probability maps: ground-truth mask rendering, a
//! stochastic stand-in for the Bayesian image-to-image network, Monte-Carlo
//! marginalisation of its samples, and PGM file IO.

mod pgm;
mod render;
mod sim;

use crate::error::{Error, Result};

pub use pgm::{load_mask, load_prob_map, save_mask, save_prob_map};
pub use render::{render_masks, RenderedMasks};
pub use sim::{simulate_inference_sample, simulate_prob_map, InferenceSimConfig};

/// Grid of branch-existence probabilities, row-major with `v = 0` on top.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap2D {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl ProbMap2D {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || values.len() != width * height {
            return Err(Error::Structure(format!(
                "{} values for a {width}x{height} map",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Structure(format!("value {} at index {i} outside [0, 1]", values[i])));
        }
        Ok(ProbMap2D {
            width,
            height,
            values,
        })
    }

    pub fn uniform(width: usize, height: usize, p: f64) -> Self {
        ProbMap2D {
            width,
            height,
            values: vec![p.clamp(0.0, 1.0); width * height],
        }
    }

    pub fn from_mask(mask: &BinaryMask) -> Self {
        ProbMap2D {
            width: mask.width,
            height: mask.height,
            values: mask.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.values[v * self.width + u]
    }
}

impl BinaryMask {
    pub fn empty(width: usize, height: usize) -> Self {
        BinaryMask {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.width == other.width
            && self.height == other.height
            && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    pub(crate) fn same_shape(&self, other: &BinaryMask) -> bool {
        self.width == other.width && self.height == other.height
    }
}

/// Per-pixel mean of the sample indicators.
pub fn estimate_prob_map(samples: &[BinaryMask]) -> Result<ProbMap2D> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Usage("no samples to marginalise".into()))?;
    if samples.iter().any(|s| !s.same_shape(first)) {
        return Err(Error::Structure("samples differ in dimensions".into()));
    }
    let mut counts = vec![0u32; first.bits.len()];
    for s in samples {
        for (c, &b) in counts.iter_mut().zip(&s.bits) {
            *c += u32::from(b);
        }
    }
    let n = samples.len() as f64;
    Ok(ProbMap2D {
        width: first.width,
        height: first.height,
        values: counts.into_iter().map(|c| c as f64 / n).collect(),
    })
}

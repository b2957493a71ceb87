use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{estimate_prob_map, BinaryMask, ProbMap2D};
use crate::error::{Error, Result};
use crate::rng;

/// Degradation channel standing in for stochastic network inference.
///
/// Each sample keeps visible branch pixels with `visible_recall`, recovers
/// leaf-occluded branch pixels with `occluded_recall`, and lights background
/// pixels with `false_positive_rate`; a box majority filter of radius
/// `blur_radius` then smooths the result. Defaults are free choices, not
/// calibrated against any trained network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceSimConfig {
    pub n_samples: usize,
    pub occluded_recall: f64,
    pub visible_recall: f64,
    pub false_positive_rate: f64,
    pub blur_radius: usize,
}

impl Default for InferenceSimConfig {
    fn default() -> Self {
        InferenceSimConfig {
            n_samples: 100,
            occluded_recall: 0.4,
            visible_recall: 0.95,
            false_positive_rate: 0.002,
            blur_radius: 1,
        }
    }
}

impl InferenceSimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::config("n_samples", "must be at least 1"));
        }
        for (name, p) in [
            ("occluded_recall", self.occluded_recall),
            ("visible_recall", self.visible_recall),
            ("false_positive_rate", self.false_positive_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(name, "must lie in [0, 1]"));
            }
        }
        Ok(())
    }
}

/// Number of failures before the first success of a Bernoulli(`p`) sequence.
fn geometric_gap(rng: &mut ChaCha8Rng, p: f64) -> u64 {
    if p <= 0.0 {
        return u64::MAX;
    }
    if p >= 1.0 {
        return 0;
    }
    let u: f64 = rng.random();
    ((1.0 - u).ln() / (1.0 - p).ln()).floor().min(u64::MAX as f64) as u64
}

/// Draws one stochastic branch mask for a view. Deterministic per
/// `(seed, sample_index)`.
pub fn simulate_inference_sample(
    full: &BinaryMask,
    visible: &BinaryMask,
    cfg: &InferenceSimConfig,
    seed: u64,
    sample_index: u64,
) -> Result<BinaryMask> {
    cfg.validate()?;
    if !full.same_shape(visible) {
        return Err(Error::Structure(format!(
            "mask dimensions differ: {}x{} vs {}x{}",
            full.width, full.height, visible.width, visible.height
        )));
    }
    let mut rng = rng::stream(seed, &[sample_index]);
    let mut bits = vec![false; full.bits.len()];
    // Background pixels are skipped geometrically; equivalent to per-pixel draws.
    let mut skip = geometric_gap(&mut rng, cfg.false_positive_rate);
    for (i, out) in bits.iter_mut().enumerate() {
        *out = if visible.bits[i] {
            rng.random::<f64>() < cfg.visible_recall
        } else if full.bits[i] {
            rng.random::<f64>() < cfg.occluded_recall
        } else if skip == 0 {
            skip = geometric_gap(&mut rng, cfg.false_positive_rate);
            true
        } else {
            skip -= 1;
            false
        };
    }
    let mask = BinaryMask {
        width: full.width,
        height: full.height,
        bits,
    };
    Ok(majority_filter(&mask, cfg.blur_radius))
}

/// Box mean over a `(2r+1)^2` window, clipped at the border, thresholded at 0.5.
fn majority_filter(mask: &BinaryMask, radius: usize) -> BinaryMask {
    if radius == 0 {
        return mask.clone();
    }
    let (w, h) = (mask.width, mask.height);
    let mut integral = vec![0u32; (w + 1) * (h + 1)];
    for v in 0..h {
        let mut row = 0;
        for u in 0..w {
            row += u32::from(mask.bits[v * w + u]);
            integral[(v + 1) * (w + 1) + u + 1] = integral[v * (w + 1) + u + 1] + row;
        }
    }
    let mut bits = vec![false; w * h];
    for v in 0..h {
        let (v0, v1) = (v.saturating_sub(radius), (v + radius + 1).min(h));
        for u in 0..w {
            let (u0, u1) = (u.saturating_sub(radius), (u + radius + 1).min(w));
            let sum = integral[v1 * (w + 1) + u1] + integral[v0 * (w + 1) + u0]
                - integral[v0 * (w + 1) + u1]
                - integral[v1 * (w + 1) + u0];
            let area = ((v1 - v0) * (u1 - u0)) as u32;
            bits[v * w + u] = 2 * sum >= area;
        }
    }
    BinaryMask {
        width: w,
        height: h,
        bits,
    }
}

/// Draws `cfg.n_samples` samples and marginalises them into a probability map.
pub fn simulate_prob_map(
    full: &BinaryMask,
    visible: &BinaryMask,
    cfg: &InferenceSimConfig,
    seed: u64,
) -> Result<ProbMap2D> {
    let samples = (0..cfg.n_samples as u64)
        .into_par_iter()
        .map(|v| simulate_inference_sample(full, visible, cfg, seed, v))
        .collect::<Result<Vec<_>>>()?;
    estimate_prob_map(&samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Left half full branch; of that, the top half visible.
    fn fixture(w: usize, h: usize) -> (BinaryMask, BinaryMask) {
        let mut full = BinaryMask::empty(w, h);
        let mut visible = BinaryMask::empty(w, h);
        for v in 0..h {
            for u in 0..w / 2 {
                full.bits[v * w + u] = true;
                visible.bits[v * w + u] = v < h / 2;
            }
        }
        (full, visible)
    }

    #[test]
    fn lossless_channel_returns_full() {
        let (full, visible) = fixture(16, 12);
        let cfg = InferenceSimConfig {
            visible_recall: 1.0,
            occluded_recall: 1.0,
            false_positive_rate: 0.0,
            blur_radius: 0,
            ..Default::default()
        };
        assert_eq!(simulate_inference_sample(&full, &visible, &cfg, 1, 0).unwrap(), full);
    }

    #[test]
    fn no_recovery_returns_visible() {
        let (full, visible) = fixture(16, 12);
        let cfg = InferenceSimConfig {
            visible_recall: 1.0,
            occluded_recall: 0.0,
            false_positive_rate: 0.0,
            blur_radius: 0,
            ..Default::default()
        };
        assert_eq!(simulate_inference_sample(&full, &visible, &cfg, 1, 3).unwrap(), visible);
    }

    #[test]
    fn occluded_recovery_is_binomial() {
        let full = BinaryMask {
            width: 100,
            height: 100,
            bits: vec![true; 10_000],
        };
        let visible = BinaryMask::empty(100, 100);
        let cfg = InferenceSimConfig {
            occluded_recall: 0.3,
            false_positive_rate: 0.0,
            blur_radius: 0,
            ..Default::default()
        };
        let bound = 3.0 * (10_000.0f64 * 0.3 * 0.7).sqrt();
        for seed in 0..5 {
            let n = simulate_inference_sample(&full, &visible, &cfg, seed, 0).unwrap().count();
            assert!((n as f64 - 3000.0).abs() <= bound, "{n}");
        }
    }

    #[test]
    fn false_positive_rate_matches_skip_sampling() {
        let full = BinaryMask::empty(200, 200);
        let cfg = InferenceSimConfig {
            false_positive_rate: 0.05,
            blur_radius: 0,
            ..Default::default()
        };
        let n = simulate_inference_sample(&full, &full, &cfg, 9, 0).unwrap().count() as f64;
        let bound = 4.0 * (40_000.0f64 * 0.05 * 0.95).sqrt();
        assert!((n - 2000.0).abs() <= bound, "{n}");
    }

    #[test]
    fn deterministic_per_sample_index() {
        let (full, visible) = fixture(20, 20);
        let cfg = InferenceSimConfig {
            false_positive_rate: 0.1,
            ..Default::default()
        };
        let a = simulate_inference_sample(&full, &visible, &cfg, 4, 2).unwrap();
        let b = simulate_inference_sample(&full, &visible, &cfg, 4, 2).unwrap();
        let c = simulate_inference_sample(&full, &visible, &cfg, 4, 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn dimension_mismatch() {
        let r = simulate_inference_sample(
            &BinaryMask::empty(3, 3),
            &BinaryMask::empty(3, 4),
            &InferenceSimConfig::default(),
            0,
            0,
        );
        assert!(matches!(r, Err(Error::Structure(_))));
    }

    #[test]
    fn majority_filter_removes_specks_keeps_bands() {
        let mut m = BinaryMask::empty(12, 12);
        m.bits[2 * 12 + 2] = true;
        for u in 0..12 {
            m.bits[8 * 12 + u] = true;
            m.bits[9 * 12 + u] = true;
        }
        let f = majority_filter(&m, 1);
        assert!(!f.bits[2 * 12 + 2]);
        assert!((1..11).all(|u| f.bits[8 * 12 + u] && f.bits[9 * 12 + u]));
        assert!(!f.bits[6 * 12 + 5]);
    }

    #[test]
    fn more_recall_never_lowers_occluded_probability() {
        let (full, visible) = fixture(24, 24);
        let occluded: Vec<usize> = (0..full.bits.len())
            .filter(|&i| full.bits[i] && !visible.bits[i])
            .collect();
        let mean_at = |recall: f64| {
            let cfg = InferenceSimConfig {
                n_samples: 4,
                occluded_recall: recall,
                blur_radius: 1,
                ..Default::default()
            };
            let mut total = 0.0;
            for seed in 0..100 {
                let m = simulate_prob_map(&full, &visible, &cfg, seed).unwrap();
                total += occluded.iter().map(|&i| m.values[i]).sum::<f64>();
            }
            total / (100 * occluded.len()) as f64
        };
        let levels = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0];
        let means: Vec<f64> = levels.iter().map(|&r| mean_at(r)).collect();
        for w in means.windows(2) {
            assert!(w[1] >= w[0], "{means:?}");
        }
    }

    #[test]
    fn prob_map_stays_in_unit_interval() {
        let (full, visible) = fixture(10, 10);
        let cfg = InferenceSimConfig {
            n_samples: 13,
            false_positive_rate: 0.3,
            blur_radius: 1,
            ..Default::default()
        };
        let m = simulate_prob_map(&full, &visible, &cfg, 2).unwrap();
        assert!(m.values.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

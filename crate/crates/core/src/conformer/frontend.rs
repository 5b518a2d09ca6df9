//! Feature frontend: frame stacking, positional encoding, SpecAugment.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Concatenates each frame with its `stack - 1` predecessors (zeros before
/// the start) and keeps every `downsample`-th frame starting at frame 0.
/// Output is `[ceil(T / downsample) × stack·d]`.
pub fn frame_stack<F: Real>(
    features: &Tensor<F>,
    stack: usize,
    downsample: usize,
) -> Result<Tensor<F>> {
    if stack == 0 || downsample == 0 {
        return Err(Error::param(
            "frame_stack: stack and downsample must be >= 1",
        ));
    }
    if features.rank() != 2 {
        return Err(Error::param(format!(
            "frame_stack: rank-2 input expected, got {:?}",
            features.shape()
        )));
    }
    let (t, d) = (features.rows(), features.cols());
    let rows = t.div_ceil(downsample);
    let mut out = vec![F::zero(); rows * stack * d];
    for (r, frame) in (0..t).step_by(downsample).enumerate() {
        for s in 0..stack {
            if let Some(src) = frame.checked_sub(s) {
                let at = (r * stack + s) * d;
                out[at..at + d].copy_from_slice(features.row(src));
            }
        }
    }
    Tensor::new(vec![rows, stack * d], out)
}

/// Sinusoidal position table: `sin(p / 10000^(2i/d))` in even columns and
/// the matching cosine in odd columns.
pub fn sinusoidal_encoding<F: Real>(
    positions: impl IntoIterator<Item = usize>,
    dim: usize,
) -> Vec<F> {
    let mut out = Vec::new();
    for p in positions {
        for j in 0..dim {
            let i = (j / 2) as f64;
            let angle = p as f64 / 10000f64.powf(2.0 * i / dim as f64);
            let v = if j % 2 == 0 { angle.sin() } else { angle.cos() };
            out.push(F::from_f64_lossy(v));
        }
    }
    out
}

/// Frequency and time masking bounds.
#[derive(Clone, Debug, PartialEq)]
pub struct SpecAugConfig {
    pub freq_masks: usize,
    pub max_freq_width: usize,
    pub time_masks: usize,
    pub max_time_width: usize,
}

impl Default for SpecAugConfig {
    fn default() -> Self {
        SpecAugConfig {
            freq_masks: 2,
            max_freq_width: 27,
            time_masks: 2,
            max_time_width: 50,
        }
    }
}

/// Zeroes random frequency bands and time spans. Widths are uniform in
/// `[0, min(max, extent)]`, positions uniform over the valid starts.
pub fn spec_augment<F: Real, R: Rng + ?Sized>(
    features: &Tensor<F>,
    cfg: &SpecAugConfig,
    rng: &mut R,
) -> Tensor<F> {
    let (t, d) = (features.rows(), features.cols());
    let mut out = features.clone();
    let data = out.data_mut();
    for _ in 0..cfg.freq_masks {
        let width = rng.random_range(0..=cfg.max_freq_width.min(d));
        let start = rng.random_range(0..=d - width);
        for row in 0..t {
            data[row * d + start..row * d + start + width].fill(F::zero());
        }
    }
    for _ in 0..cfg.time_masks {
        let width = rng.random_range(0..=cfg.max_time_width.min(t));
        let start = rng.random_range(0..=t - width);
        data[start * d..(start + width) * d].fill(F::zero());
    }
    out
}

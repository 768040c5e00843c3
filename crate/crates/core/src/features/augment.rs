use rand::Rng;
use serde::{Deserialize, Serialize};

use super::FeatureMatrix;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskFill {
    Zero,
    Mean,
}

/// Time/frequency masking plus optional frequency warping.
///
/// Each of the `n` masks along an axis of length `L` has an integer width drawn
/// uniformly from `[⌈W/2⌉, W]` with `W = ⌊fraction·L/n⌋`, so the masked total
/// never exceeds `fraction·L`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentPolicy {
    pub time_mask_fraction: f64,
    pub n_time_masks: usize,
    pub freq_mask_fraction: f64,
    pub n_freq_masks: usize,
    pub freq_warp: bool,
    pub max_warp_bands: usize,
    pub mask_fill: MaskFill,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            time_mask_fraction: 0.2,
            n_time_masks: 2,
            freq_mask_fraction: 0.2,
            n_freq_masks: 2,
            freq_warp: true,
            max_warp_bands: 5,
            mask_fill: MaskFill::Zero,
        }
    }
}

impl AugmentPolicy {
    pub fn none() -> Self {
        Self {
            time_mask_fraction: 0.0,
            n_time_masks: 0,
            freq_mask_fraction: 0.0,
            n_freq_masks: 0,
            freq_warp: false,
            max_warp_bands: 0,
            mask_fill: MaskFill::Zero,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, f) in [
            ("time_mask_fraction", self.time_mask_fraction),
            ("freq_mask_fraction", self.freq_mask_fraction),
        ] {
            if !(0.0..1.0).contains(&f) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {f}")));
            }
        }
        Ok(())
    }
}

fn sample_masks<R: Rng + ?Sized>(
    len: usize,
    fraction: f64,
    n: usize,
    rng: &mut R,
) -> Vec<(usize, usize)> {
    if n == 0 || fraction <= 0.0 {
        return Vec::new();
    }
    let max_w = (fraction * len as f64 / n as f64).floor() as usize;
    if max_w == 0 {
        return Vec::new();
    }
    (0..n)
        .map(|_| {
            let w = rng.gen_range(max_w.div_ceil(2)..=max_w);
            let start = rng.gen_range(0..=len - w);
            (start, w)
        })
        .collect()
}

/// Frequency warp (when enabled) followed by time and frequency masks.
pub fn specaugment<R: Rng + ?Sized>(
    f: &FeatureMatrix,
    p: &AugmentPolicy,
    rng: &mut R,
) -> Result<FeatureMatrix> {
    p.validate()?;
    let mut out = if p.freq_warp && p.max_warp_bands > 0 {
        freq_warp(f, p.max_warp_bands, rng)
    } else {
        f.clone()
    };
    let fill = match p.mask_fill {
        MaskFill::Zero => 0.0,
        MaskFill::Mean => out.mean(),
    };
    let (t_len, d) = (out.frames(), out.dims());
    let time = sample_masks(t_len, p.time_mask_fraction, p.n_time_masks, rng);
    let freq = sample_masks(d, p.freq_mask_fraction, p.n_freq_masks, rng);
    let vals = out.values_mut();
    for (s, w) in time {
        for t in s..s + w {
            vals[t * d..(t + 1) * d].fill(fill);
        }
    }
    for (s, w) in freq {
        for t in 0..t_len {
            vals[t * d + s..t * d + s + w].fill(fill);
        }
    }
    Ok(out)
}

/// Piecewise-linear remap of the frequency axis that moves band `anchor` to
/// `anchor + shift` while keeping both ends fixed; values are linearly interpolated.
pub fn warp_frequency(f: &FeatureMatrix, anchor: usize, shift: i64) -> Result<FeatureMatrix> {
    let d = f.dims();
    let dest = anchor as i64 + shift;
    if anchor == 0 || anchor + 1 >= d || dest <= 0 || dest >= d as i64 - 1 {
        return Err(Error::arg(format!(
            "warp anchor {anchor} shift {shift} outside (0, {})",
            d - 1
        )));
    }
    if shift == 0 {
        return Ok(f.clone());
    }
    let (a, top, dest) = (anchor as f64, (d - 1) as f64, dest as f64);
    let src: Vec<(usize, f32)> = (0..d)
        .map(|j| {
            let j = j as f64;
            let s = if j <= dest {
                j * a / dest
            } else {
                a + (j - dest) * (top - a) / (top - dest)
            };
            let lo = (s.floor() as usize).min(d - 1);
            (lo, (s - lo as f64) as f32)
        })
        .collect();
    let mut out = f.clone();
    for t in 0..f.frames() {
        let row = f.frame(t);
        let o = &mut out.values_mut()[t * d..(t + 1) * d];
        for (j, &(lo, frac)) in src.iter().enumerate() {
            o[j] = if frac == 0.0 {
                row[lo]
            } else {
                row[lo] * (1.0 - frac) + row[(lo + 1).min(d - 1)] * frac
            };
        }
    }
    Ok(out)
}

/// Random warp with `|shift| ≤ max_shift_bands` (clamped to `D/4`).
pub fn freq_warp<R: Rng + ?Sized>(
    f: &FeatureMatrix,
    max_shift_bands: usize,
    rng: &mut R,
) -> FeatureMatrix {
    let d = f.dims();
    let max_shift = max_shift_bands.min(d / 4);
    if max_shift == 0 || d < 2 * max_shift + 3 {
        return f.clone();
    }
    let anchor = rng.gen_range(max_shift + 1..d - 1 - max_shift);
    let shift = rng.gen_range(-(max_shift as i64)..=max_shift as i64);
    warp_frequency(f, anchor, shift).expect("anchor chosen inside valid range")
}

/// A sampled span mask and the window starts that produced it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpanMask {
    pub mask: Vec<bool>,
    /// Window starts; may be negative, windows are clipped to `[0, len)`.
    pub starts: Vec<i64>,
    pub span: usize,
}

/// Span masking for the contrastive task. Every start position in
/// `[1 − span, len)` is drawn independently with probability
/// `1 − (1 − fraction)^(1/span)`, so each frame is covered with probability
/// exactly `fraction` regardless of `len`.
pub fn span_mask<R: Rng + ?Sized>(
    len: usize,
    fraction: f64,
    span: usize,
    rng: &mut R,
) -> Result<SpanMask> {
    if span == 0 {
        return Err(Error::arg("mask span must be at least 1"));
    }
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::arg(format!(
            "mask fraction must lie in [0, 1), got {fraction}"
        )));
    }
    let mut mask = vec![false; len];
    let mut starts = Vec::new();
    if fraction > 0.0 {
        let p_start = 1.0 - (1.0 - fraction).powf(1.0 / span as f64);
        for s in (1 - span as i64)..len as i64 {
            if rng.gen::<f64>() < p_start {
                starts.push(s);
                let lo = s.max(0) as usize;
                let hi = ((s + span as i64) as usize).min(len);
                mask[lo..hi].fill(true);
            }
        }
    }
    Ok(SpanMask { mask, starts, span })
}

pub fn contrastive_time_mask<R: Rng + ?Sized>(
    len: usize,
    fraction: f64,
    span: usize,
    rng: &mut R,
) -> Result<Vec<bool>> {
    Ok(span_mask(len, fraction, span, rng)?.mask)
}
